//! Seeded generator of small Penn-Treebank-style parse trees.
//!
//! The grammar covers every chunk type, function tags, coindexed traces,
//! punctuation, phrasal verbs and POS-ambiguous words, and marks person,
//! location and organization names so the same sentences double as NER data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chunk::{chunk_spans, derive_chunks, encode_bio, Span};
use crate::corpus::{ParseTree, TaggedSentence};
use crate::error::Result;
use crate::msync::ChunkedSentence;

/// A generated tree with its named-entity spans (token positions exclude
/// trace leaves).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSentence {
    pub tree: ParseTree,
    pub entities: Vec<Span<String>>,
}

impl SynthSentence {
    pub fn tokens(&self) -> Vec<String> {
        leaves_without_traces(&self.tree).into_iter().map(|(w, _)| w).collect()
    }

    pub fn pos(&self) -> Vec<String> {
        leaves_without_traces(&self.tree).into_iter().map(|(_, p)| p).collect()
    }

    /// Tokens, POS and BIO chunk tags of the trace-free tree.
    pub fn chunk_sentence(&self) -> Result<TaggedSentence> {
        let tree = crate::corpus::read_ptb(&self.tree.to_string())?.remove(0);
        let spans = derive_chunks(&tree)?;
        let n = tree.num_leaves();
        let tags = encode_bio(&spans, n)?.iter().map(ToString::to_string).collect();
        TaggedSentence::new(tree.words(), Some(tree.pos_tags()), Some(tags))
    }

    /// Tokens with their derived chunk spans.
    pub fn chunked(&self) -> Result<ChunkedSentence> {
        let tagged = self.chunk_sentence()?;
        let spans = chunk_spans(tagged.chunk_tags.as_deref().unwrap_or_default())?;
        Ok(ChunkedSentence::new(tagged.tokens, spans))
    }

    /// Tokens, POS and BIO entity tags.
    pub fn ner_sentence(&self) -> Result<TaggedSentence> {
        let n = self.tokens().len();
        let tags = encode_bio(&self.entities, n)?.iter().map(ToString::to_string).collect();
        TaggedSentence::new(self.tokens(), Some(self.pos()), Some(tags))
    }
}

fn leaves_without_traces(t: &ParseTree) -> Vec<(String, String)> {
    t.leaves()
        .into_iter()
        .filter(|(_, p)| *p != "-NONE-")
        .map(|(w, p)| (w.to_string(), p.to_string()))
        .collect()
}

const DT: &[&str] = &["the", "a", "this", "that", "every", "some", "each", "no"];
const JJ: &[&str] = &[
    "big", "small", "old", "new", "red", "quick", "happy", "large", "strong", "quiet", "early", "local", "major",
    "public", "final", "busy", "cheap", "long",
];
const NN: &[&str] = &[
    "dog", "cat", "house", "car", "man", "woman", "book", "report", "market", "price", "company", "city", "plan",
    "game", "school", "river", "paper", "deal", "run", "saw", "can", "board", "street", "week", "year", "bank",
    "letter", "train", "farm", "store",
];
const NNS: &[&str] = &[
    "dogs", "cats", "prices", "reports", "shares", "children", "workers", "plans", "games", "books", "cars",
    "banks", "letters", "trains", "farmers", "stores",
];
const PRP: &[&str] = &["he", "she", "it", "they", "we", "I"];
const PRPS: &[&str] = &["his", "her", "their", "its", "our"];
const VBZ_T: &[&str] = &["sees", "likes", "buys", "sells", "makes", "takes", "needs", "finds", "reads", "books"];
const VBD_T: &[&str] = &["saw", "liked", "bought", "sold", "made", "took", "needed", "found", "read", "booked"];
const VB_T: &[&str] = &["see", "like", "buy", "sell", "make", "take", "need", "find", "read", "book"];
const VBZ_I: &[&str] = &["runs", "sleeps", "waits", "works", "falls", "rises"];
const VBD_I: &[&str] = &["ran", "slept", "waited", "worked", "fell", "rose"];
const VB_I: &[&str] = &["run", "sleep", "wait", "work", "fall", "rise"];
const VBD_SAY: &[&str] = &["said", "thought", "knew", "claimed", "noted"];
const VBD_WANT: &[&str] = &["wanted", "tried", "planned", "hoped", "decided"];
const VBD_PHRASAL: &[(&str, &[&str])] = &[
    ("picked", &["up"]),
    ("gave", &["back", "up"]),
    ("looked", &["up", "over"]),
    ("turned", &["down", "off"]),
    ("set", &["up", "out"]),
    ("took", &["over", "out"]),
];
const VBZ_LINK: &[&str] = &["seems", "looks", "is", "remains"];
const VBD_LINK: &[&str] = &["seemed", "looked", "was", "became"];
const MD: &[&str] = &["will", "can", "could", "would", "should", "may", "must"];
const RB_ADV: &[&str] = &["quickly", "often", "never", "also", "still", "slowly", "really", "soon"];
const RB_DEG: &[&str] = &["very", "quite", "too", "so"];
const RB_TIME: &[&str] = &["today", "now", "here", "later", "yesterday"];
const IN_P: &[&str] = &["in", "on", "at", "with", "from", "for", "of", "near", "after", "before", "about", "under", "up", "over", "into"];
const IN_SUB: &[&str] = &["because", "if", "although", "while", "after", "before"];
const CC: &[&str] = &["and", "but", "or"];
const CD: &[&str] = &["two", "three", "ten", "5", "100", "20", "many", "four"];
const UH: &[&str] = &["yes", "oh", "well", "no"];
const LS: &[&str] = &["1", "2", "3", "a", "b"];
const CONJP: &[&[(&str, &str)]] = &[
    &[("RB", "rather"), ("IN", "than")],
    &[("RB", "as"), ("RB", "well"), ("IN", "as")],
    &[("RB", "not"), ("RB", "only")],
];

const FIRST: &[&str] = &["John", "Mary", "Peter", "Anna", "David", "Laura", "James", "Sarah", "Tom", "Emma"];
const LAST: &[&str] = &["Smith", "Brown", "Jones", "Miller", "Davis", "Wilson", "Clark", "Lewis", "Young"];
const LOC: &[&[&str]] = &[
    &["Paris"],
    &["London"],
    &["Berlin"],
    &["Tokyo"],
    &["Chicago"],
    &["Boston"],
    &["New", "York"],
    &["San", "Francisco"],
    &["Texas"],
    &["Europe"],
    &["China"],
];
const ORG: &[&[&str]] = &[
    &["Acme", "Corp"],
    &["General", "Motors"],
    &["Apple"],
    &["IBM"],
    &["United", "Nations"],
    &["Reuters"],
    &["Boeing"],
    &["Ford", "Motor", "Co"],
];

/// Tree generator; every call to [`Generator::sentence`] draws from one
/// seeded stream.
pub struct Generator {
    rng: ChaCha8Rng,
    pos: usize,
    entities: Vec<Span<String>>,
    trace: usize,
}

fn leaf(pos: &str, word: &str) -> ParseTree {
    ParseTree::leaf(pos, word)
}

fn node(label: &str, children: Vec<ParseTree>) -> ParseTree {
    ParseTree::node(label, children)
}

impl Generator {
    pub fn new(seed: u64) -> Self {
        Generator {
            rng: ChaCha8Rng::seed_from_u64(seed),
            pos: 0,
            entities: Vec::new(),
            trace: 0,
        }
    }

    fn pick<'a>(&mut self, xs: &[&'a str]) -> &'a str {
        xs.choose(&mut self.rng).unwrap()
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    fn word(&mut self, pos: &str, xs: &[&str]) -> ParseTree {
        let w = self.pick(xs);
        self.pos += 1;
        leaf(pos, w)
    }

    fn fixed(&mut self, pos: &str, w: &str) -> ParseTree {
        self.pos += 1;
        leaf(pos, w)
    }

    fn trace_leaf(&mut self) -> ParseTree {
        self.trace += 1;
        leaf("-NONE-", &format!("*-{}", self.trace))
    }

    /// A complete sentence.
    pub fn sentence(&mut self) -> SynthSentence {
        self.pos = 0;
        self.entities.clear();
        self.trace = 0;
        let roll = self.rng.gen_range(0..100);
        let tree = if roll < 4 {
            let mut kids = vec![node("LST", vec![self.word("LS", LS), self.fixed(":", ":")])];
            kids.extend(self.clause_parts(0));
            kids.push(self.fixed(".", "."));
            node("S", kids)
        } else if roll < 10 {
            let intj = node("INTJ", vec![self.word("UH", UH)]);
            let comma = self.fixed(",", ",");
            let mut kids = vec![intj, comma];
            kids.extend(self.clause_parts(0));
            kids.push(self.fixed(".", "."));
            node("S", kids)
        } else if roll < 18 {
            let open = self.fixed("``", "``");
            let quoted = self.clause(1);
            let comma = self.fixed(",", ",");
            let close = self.fixed("''", "''");
            let speaker = self.person_np("NP-SBJ");
            let verb = node("VP", vec![self.word("VBD", VBD_SAY)]);
            let stop = self.fixed(".", ".");
            node("S", vec![open, quoted, comma, close, speaker, verb, stop])
        } else if roll < 28 {
            let a = self.clause(1);
            let comma = self.fixed(",", ",");
            let cc = self.word("CC", CC);
            let b = self.clause(1);
            let stop = self.fixed(".", ".");
            node("S", vec![a, comma, cc, b, stop])
        } else if roll < 38 {
            let adv = node("ADVP-TMP", vec![self.word("RB", RB_TIME)]);
            let comma = self.fixed(",", ",");
            let mut kids = vec![adv, comma];
            kids.extend(self.clause_parts(0));
            kids.push(self.fixed(".", "."));
            node("S", kids)
        } else {
            let mut kids = self.clause_parts(0);
            kids.push(self.fixed(".", "."));
            node("S", kids)
        };
        SynthSentence {
            tree,
            entities: std::mem::take(&mut self.entities),
        }
    }

    fn clause(&mut self, depth: usize) -> ParseTree {
        let kids = self.clause_parts(depth);
        node("S", kids)
    }

    fn clause_parts(&mut self, depth: usize) -> Vec<ParseTree> {
        let subj = self.np("NP-SBJ", depth);
        let vp = self.vp(depth);
        vec![subj, vp]
    }

    fn np(&mut self, label: &str, depth: usize) -> ParseTree {
        let roll = self.rng.gen_range(0..100);
        match roll {
            0..=11 => node(label, vec![self.word("PRP", PRP)]),
            12..=21 => self.person_np(label),
            22..=27 => self.org_np(label),
            28..=31 => {
                let kids = vec![self.fixed("$", "$"), self.word("CD", &CD[3..6])];
                node(label, kids)
            }
            32..=37 => {
                let kids = vec![self.word("CD", CD), self.word("NNS", NNS)];
                node(label, kids)
            }
            38..=45 if depth < 2 => {
                let inner = self.base_np("NP");
                let pp = self.pp("PP", depth + 1);
                node(label, vec![inner, pp])
            }
            46..=49 if depth < 2 => {
                let a = self.base_np("NP");
                let cc = self.word("CC", CC);
                let b = self.base_np("NP");
                node(label, vec![a, cc, b])
            }
            50..=52 if depth < 2 => {
                let a = self.base_np("NP");
                let pick = *CONJP.choose(&mut self.rng).unwrap();
                let words: Vec<ParseTree> = pick.iter().map(|(p, w)| self.fixed(p, w)).collect();
                let b = self.base_np("NP");
                node(label, vec![a, node("CONJP", words), b])
            }
            53..=55 => {
                let dt = self.word("DT", &DT[..2]);
                let ucp = node(
                    "UCP",
                    vec![self.word("JJ", JJ), self.word("CC", &CC[..1]), self.word("NN", NN)],
                );
                let head = self.word("NNS", NNS);
                node(label, vec![dt, ucp, head])
            }
            56..=60 => {
                let dt = self.word("DT", &DT[..1]);
                let adjp = node("ADJP", vec![self.word("RB", RB_DEG), self.word("JJ", JJ)]);
                let head = self.word("NN", NN);
                node(label, vec![dt, adjp, head])
            }
            _ => self.base_np(label),
        }
    }

    fn base_np(&mut self, label: &str) -> ParseTree {
        let mut kids = Vec::new();
        if self.chance(0.15) {
            kids.push(self.word("PRP$", PRPS));
        } else if self.chance(0.9) {
            kids.push(self.word("DT", DT));
        }
        let plural = self.chance(0.3);
        if self.chance(0.4) {
            kids.push(self.word("JJ", JJ));
        }
        if plural {
            kids.push(self.word("NNS", NNS));
        } else {
            kids.push(self.word("NN", NN));
        }
        node(label, kids)
    }

    fn entity(&mut self, pos: &str, words: &[&str], kind: &str) -> Vec<ParseTree> {
        let begin = self.pos;
        let out: Vec<ParseTree> = words.iter().map(|w| self.fixed(pos, w)).collect();
        self.entities.push(Span::new(begin, self.pos - 1, kind.to_string()));
        out
    }

    fn person_np(&mut self, label: &str) -> ParseTree {
        let last = self.pick(LAST);
        let words = if self.chance(0.6) {
            vec![self.pick(FIRST), last]
        } else {
            vec![last]
        };
        let kids = self.entity("NNP", &words, "PER");
        node(label, kids)
    }

    fn org_np(&mut self, label: &str) -> ParseTree {
        let name = *ORG.choose(&mut self.rng).unwrap();
        let mut kids = Vec::new();
        if self.chance(0.3) {
            kids.push(self.fixed("DT", "the"));
        }
        kids.extend(self.entity("NNP", name, "ORG"));
        node(label, kids)
    }

    fn loc_np(&mut self) -> ParseTree {
        let name = *LOC.choose(&mut self.rng).unwrap();
        let kids = self.entity("NNP", name, "LOC");
        node("NP", kids)
    }

    fn pp(&mut self, label: &str, depth: usize) -> ParseTree {
        let prep = self.word("IN", IN_P);
        let obj = if self.chance(0.3) { self.loc_np() } else { self.np("NP", depth + 1) };
        node(label, vec![prep, obj])
    }

    fn adjuncts(&mut self, depth: usize, kids: &mut Vec<ParseTree>) {
        if depth < 2 && self.chance(0.3) {
            let l = *["PP-LOC", "PP-TMP", "PP"].choose(&mut self.rng).unwrap();
            kids.push(self.pp(l, depth));
        }
        if self.chance(0.1) {
            kids.push(node("ADVP-TMP", vec![self.word("RB", RB_TIME)]));
        }
        if depth == 0 && self.chance(0.12) {
            let sub = self.word("IN", IN_SUB);
            let s = self.clause(depth + 2);
            kids.push(node("SBAR-ADV", vec![sub, s]));
        }
    }

    fn vp(&mut self, depth: usize) -> ParseTree {
        let past = self.chance(0.5);
        let modal = !past && self.chance(0.25);
        let pre_adv = self.chance(0.12);
        let roll = self.rng.gen_range(0..100);
        let mut kids = Vec::new();
        if pre_adv {
            kids.push(node("ADVP", vec![self.word("RB", RB_ADV)]));
        }
        let (tv, iv): (&[&str], &[&str]) = if modal {
            (VB_T, VB_I)
        } else if past {
            (VBD_T, VBD_I)
        } else {
            (VBZ_T, VBZ_I)
        };
        let vtag = if modal {
            "VB"
        } else if past {
            "VBD"
        } else {
            "VBZ"
        };
        let mut inner = Vec::new();
        match roll {
            0..=39 => {
                inner.push(self.word(vtag, tv));
                inner.push(self.np("NP", depth + 1));
            }
            40..=54 => {
                inner.push(self.word(vtag, iv));
            }
            55..=64 if !modal => {
                let (v, parts) = *VBD_PHRASAL.choose(&mut self.rng).unwrap();
                inner.push(self.fixed("VBD", v));
                let rp = self.pick(parts);
                inner.push(node("PRT", vec![self.fixed("RP", rp)]));
                inner.push(self.np("NP", depth + 1));
            }
            65..=74 if !modal => {
                let v = if past { self.pick(VBD_LINK) } else { self.pick(VBZ_LINK) };
                inner.push(self.fixed(vtag, v));
                let adjp = if self.chance(0.5) {
                    vec![self.word("RB", RB_DEG), self.word("JJ", JJ)]
                } else {
                    vec![self.word("JJ", JJ)]
                };
                inner.push(node("ADJP-PRD", adjp));
            }
            75..=84 if depth < 2 => {
                inner.push(self.word("VBD", VBD_SAY));
                let comp = self.fixed("IN", "that");
                let s = self.clause(depth + 2);
                inner.push(node("SBAR", vec![comp, s]));
            }
            85..=94 if depth < 2 => {
                inner.push(self.word("VBD", VBD_WANT));
                let t = self.trace_leaf();
                let to = self.fixed("TO", "to");
                let v = self.word("VB", VB_T);
                let obj = self.np("NP", depth + 1);
                let inf = node("VP", vec![to, node("VP", vec![v, obj])]);
                inner.push(node("S", vec![node("NP-SBJ", vec![t]), inf]));
            }
            _ => {
                inner.push(self.word(vtag, iv));
                inner.push(node("ADVP-MNR", vec![self.word("RB", RB_ADV)]));
            }
        }
        self.adjuncts(depth, &mut inner);
        if modal {
            let md = self.word("MD", MD);
            kids.push(md);
            kids.push(node("VP", inner));
        } else {
            kids.extend(inner);
        }
        node("VP", kids)
    }
}

/// `n` sentences from `seed`.
pub fn generate(n: usize, seed: u64) -> Vec<SynthSentence> {
    let mut g = Generator::new(seed);
    (0..n).map(|_| g.sentence()).collect()
}

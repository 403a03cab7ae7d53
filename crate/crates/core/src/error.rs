use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unbalanced parentheses at line {line}, byte {offset}")]
    UnbalancedParens { line: usize, offset: usize },
    #[error("tree has no leaves{}", at_line(*.line))]
    EmptyTree { line: usize },
    #[error("malformed tree at line {line}: {message}")]
    MalformedTree { line: usize, message: String },
    #[error("line {line}: expected 3 space-separated columns, found {found}")]
    BadColumnCount { line: usize, found: usize },
    #[error("corpus contains no sentences")]
    EmptyCorpus,
    #[error("sentence {0} has no chunk tags")]
    MissingTags(usize),
    #[error("sentence {sentence}: parallel columns have different lengths")]
    RaggedSentence { sentence: usize },
    #[error("unknown chunk label `{0}`")]
    UnknownLabel(String),
    #[error("malformed tag `{0}`")]
    BadTag(String),
    #[error("span {begin}..={end} out of range for {len} tokens")]
    SpanOutOfRange { begin: usize, end: usize, len: usize },
    #[error("spans overlap or are unsorted at span {0}")]
    OverlappingSpans(usize),
    #[error("invalid tag sequence at position {0}")]
    InvalidSequence(usize),
    #[error("gold and predicted corpora differ in length ({gold} vs {pred})")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("every path through the lattice is masked")]
    NoValidPath,
    #[error("gold path uses a disallowed transition at position {0}")]
    GoldPathMasked(usize),
    #[error("tag id {tag} out of range for {size} tags")]
    TagOutOfRange { tag: usize, size: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid tags in sentence {sentence}: {message}")]
    InvalidTags { sentence: usize, message: String },
    #[error("cannot process an empty sentence")]
    EmptySentence,
    #[error("sentence {0} has no chunk spans but the model needs them")]
    MissingSpans(usize),
    #[error("the `{0}` scheme needs an initial baseline checkpoint")]
    MissingInit(String),
    #[error("initial checkpoint does not fit this model: {0}")]
    IncompatibleInit(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("mix has {weights} weights but the stack has {layers} layers")]
    LayerCountMismatch { weights: usize, layers: usize },
    #[error("chunk features requested but no chunker was supplied")]
    MissingChunker,
    #[error("sentence {sentence}: {labels} labels for {tokens} tokens")]
    LabelLengthMismatch {
        sentence: usize,
        labels: usize,
        tokens: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] msync_autodiff::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn at_line(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" (tree starting at line {line})")
    }
}

impl Error {
    /// True for NaN/inf losses and failed gradient checks.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

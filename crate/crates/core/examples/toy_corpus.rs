//! Writes a synthetic data set for trying the command-line tools:
//!
//! ```text
//! cargo run -p msync-core --example toy_corpus -- <dir> [sentences] [seed]
//! ```
//!
//! Files: `trees.mrg`, `chunks.{train,dev}.txt` (token, POS, chunk tag),
//! `raw.txt` with `raw.chunks.txt` alongside, and `ner.{train,dev}.txt`.

use std::fs;
use std::path::PathBuf;

use msync_core::corpus::{write_conll2000, write_ptb, write_raw};
use msync_core::synth::generate;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().ok_or("usage: toy_corpus <dir> [sentences] [seed]")?);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(400);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    fs::create_dir_all(&dir)?;

    let sents = generate(n, seed);
    let split = n * 4 / 5;
    let trees: Vec<_> = sents.iter().map(|s| s.tree.clone()).collect();
    fs::write(dir.join("trees.mrg"), write_ptb(&trees))?;

    let chunks = sents.iter().map(|s| s.chunk_sentence()).collect::<Result<Vec<_>, _>>()?;
    fs::write(dir.join("chunks.train.txt"), write_conll2000(&chunks[..split])?)?;
    fs::write(dir.join("chunks.dev.txt"), write_conll2000(&chunks[split..])?)?;

    let tokens: Vec<Vec<String>> = chunks.iter().map(|s| s.tokens.clone()).collect();
    fs::write(dir.join("raw.txt"), write_raw(&tokens))?;
    let untagged_pos: Vec<_> = chunks
        .iter()
        .map(|s| msync_core::corpus::TaggedSentence {
            pos: None,
            ..s.clone()
        })
        .collect();
    fs::write(dir.join("raw.chunks.txt"), write_conll2000(&untagged_pos)?)?;

    let ner = sents.iter().map(|s| s.ner_sentence()).collect::<Result<Vec<_>, _>>()?;
    fs::write(dir.join("ner.train.txt"), write_conll2000(&ner[..split])?)?;
    fs::write(dir.join("ner.dev.txt"), write_conll2000(&ner[split..])?)?;
    println!("wrote {n} sentences to {}", dir.display());
    Ok(())
}

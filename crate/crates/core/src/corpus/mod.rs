//! Tokenized corpora, vocabulary, batching and checkpoints.

mod checkpoint;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_params_checked, save_checkpoint, Checkpoint};
pub use vocab::{detokenize, tokenize, Vocabulary, BOS, EOS, PAD, SPECIALS, UNK, UNK_TOKEN};

use crate::error::{Error, Result};
use crate::objectives::{align_labels, TokenLabels};

/// Aligned source/target sentence with ids and auxiliary supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub src_tokens: Vec<String>,
    pub trg_tokens: Vec<String>,
    pub src_ids: Vec<usize>,
    /// Target ids without framing; see [`SentencePair::decoder_input`].
    pub trg_ids: Vec<usize>,
    pub labels: Option<TokenLabels>,
    pub changed_mask: Option<Vec<bool>>,
    /// Identity pair fed with the encoder-decoder attention removed.
    pub is_identity: bool,
}

impl SentencePair {
    /// Builds a pair and derives token labels and the changed-word mask from
    /// a minimal token alignment.
    pub fn new(src_tokens: Vec<String>, trg_tokens: Vec<String>, vocab: &Vocabulary) -> Self {
        let (labels, changed) = if src_tokens.is_empty() || trg_tokens.is_empty() {
            (None, None)
        } else {
            let (l, c) = align_labels(&src_tokens, &trg_tokens);
            (Some(l), Some(c))
        };
        Self {
            src_ids: vocab.encode(&src_tokens),
            trg_ids: vocab.encode(&trg_tokens),
            src_tokens,
            trg_tokens,
            labels,
            changed_mask: changed,
            is_identity: false,
        }
    }

    /// `sentence → sentence` pair for the sentence-level copying task.
    pub fn identity(tokens: Vec<String>, vocab: &Vocabulary) -> Self {
        let mut p = Self::new(tokens.clone(), tokens, vocab);
        p.is_identity = true;
        p
    }

    /// `bos y_1 … y_T`
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.trg_ids.iter().copied()).collect()
    }

    /// `y_1 … y_T eos` as surface forms.
    pub fn decoder_output_tokens(&self) -> Vec<String> {
        self.trg_tokens.iter().cloned().chain(std::iter::once(SPECIALS[EOS].to_string())).collect()
    }

    pub fn is_unchanged(&self) -> bool {
        self.src_tokens == self.trg_tokens
    }

    /// Tokens occupied by the longer side once framed for decoding.
    pub fn footprint(&self) -> usize {
        self.src_tokens.len().max(self.trg_tokens.len() + 1)
    }
}

/// Raw token pair as read from disk.
pub type TokenPair = (Vec<String>, Vec<String>);

/// Reads `source<TAB>target` lines. Single-column lines are identity pairs.
pub fn read_parallel(path: &Path) -> Result<Vec<TokenPair>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let src = tokenize(cols.next().unwrap_or(""));
        let trg = match cols.next() {
            Some(t) => tokenize(t),
            None => src.clone(),
        };
        if cols.next().is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "more than two tab-separated columns".into(),
            });
        }
        if src.is_empty() || trg.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty source or target".into(),
            });
        }
        out.push((src, trg));
    }
    Ok(out)
}

/// Reads one tokenized sentence per line (blank lines skipped).
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let toks = tokenize(&line);
        if !toks.is_empty() {
            out.push(toks);
        }
    }
    Ok(out)
}

/// Reads one sentence per line keeping blank lines as empty sentences, so
/// line numbers stay aligned across hypothesis/source/reference files.
pub fn read_lines_aligned(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

pub fn write_parallel(path: &Path, pairs: &[TokenPair]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (s, t) in pairs {
        writeln!(w, "{}\t{}", detokenize(s), detokenize(t)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_sentences(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in sentences {
        writeln!(w, "{}", detokenize(s)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Anything with a source and target side that can be compared.
pub trait Unchanged {
    fn unchanged(&self) -> bool;
}

impl Unchanged for TokenPair {
    fn unchanged(&self) -> bool {
        self.0 == self.1
    }
}

impl Unchanged for SentencePair {
    fn unchanged(&self) -> bool {
        self.is_unchanged()
    }
}

/// Drops pairs whose target equals the source token-for-token; returns the
/// kept pairs and the number dropped.
pub fn filter_unchanged<P: Unchanged>(pairs: Vec<P>) -> (Vec<P>, usize) {
    let before = pairs.len();
    let kept: Vec<P> = pairs.into_iter().filter(|p| !p.unchanged()).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Output of [`batch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batches {
    /// Indices into the input slice, one vector per batch.
    pub batches: Vec<Vec<usize>>,
    /// Pairs longer than the token budget.
    pub skipped: Vec<usize>,
}

/// Length-bucketed batching under a padded-token budget: a batch of `n`
/// pairs whose longest footprint is `L` costs `n * L` tokens.
pub fn batch(pairs: &[SentencePair], max_tokens: usize) -> Batches {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].footprint(), pairs[i].src_tokens.len()));
    let mut batches = Vec::new();
    let mut skipped = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let f = pairs[i].footprint();
        if f > max_tokens {
            skipped.push(i);
            continue;
        }
        let l = longest.max(f);
        if !current.is_empty() && (current.len() + 1) * l > max_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(f);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    skipped.sort_unstable();
    Batches { batches, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["a", "b", "c", "x"].iter().map(|s| s.to_string())).unwrap()
    }

    fn pair(s: &str, t: &str) -> SentencePair {
        SentencePair::new(tokenize(s), tokenize(t), &vocab())
    }

    #[test]
    fn filter_drops_identical_pairs() {
        let pairs: Vec<TokenPair> = (0..10)
            .map(|i| {
                let s = tokenize("a b c");
                let t = if i % 5 < 2 { s.clone() } else { tokenize("a x c") };
                (s, t)
            })
            .collect();
        let (kept, dropped) = filter_unchanged(pairs);
        assert_eq!(kept.len(), 6);
        assert_eq!(dropped, 4);
        let (kept, dropped) = filter_unchanged(vec![pair("a b", "a b"), pair("a b", "a c")]);
        assert_eq!((kept.len(), dropped), (1, 1));
    }

    #[test]
    fn batching_respects_budget() {
        let one = vec![pair("a b c", "a b c")];
        assert_eq!(batch(&one, 100).batches, vec![vec![0]]);
        let two = vec![pair("a b", "a b"), pair("b c", "b c")];
        assert_eq!(batch(&two, 6).batches.len(), 1);
        assert_eq!(batch(&two, 5).batches.len(), 2);
        let b = batch(&[pair("a b c a b c", "a"), pair("a", "a")], 4);
        assert_eq!(b.skipped, vec![0]);
        assert_eq!(b.batches, vec![vec![1]]);
    }

    #[test]
    fn identity_pairs_have_no_changes() {
        let p = SentencePair::identity(tokenize("a b zz"), &vocab());
        assert!(p.is_identity);
        assert_eq!(p.src_ids, vec![4, 5, UNK]);
        assert!(p.changed_mask.as_ref().unwrap().iter().all(|c| !c));
        assert_eq!(p.decoder_input(), vec![BOS, 4, 5, UNK]);
    }

    #[test]
    fn parallel_file_round_trip_and_identity_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        let pairs = vec![(tokenize("a b"), tokenize("a c")), (tokenize("x"), tokenize("x"))];
        write_parallel(&path, &pairs).unwrap();
        assert_eq!(read_parallel(&path).unwrap(), pairs);
        std::fs::write(&path, "solo line\n").unwrap();
        assert_eq!(read_parallel(&path).unwrap(), vec![(tokenize("solo line"), tokenize("solo line"))]);
        std::fs::write(&path, "a\tb\tc\n").unwrap();
        assert!(matches!(read_parallel(&path), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_parallel(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(words in proptest::collection::vec("[a-zA-Z0-9.,']{1,6}", 1..12)) {
            let line = words.join(" ");
            prop_assert_eq!(detokenize(&tokenize(&line)), line);
        }
    }
}

//! Token-edit extraction and precision/recall/F0.5 scoring.

use std::collections::BTreeSet;
use std::fmt;

use crate::corpus::{Vocabulary, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::objectives::{edit_script, EditOp};

/// Replace source tokens `[start, end)` with `replacement`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edit {
    pub start: usize,
    pub end: usize,
    pub replacement: Vec<String>,
}

/// Non-overlapping edits sorted by span.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EditSet {
    pub edits: BTreeSet<Edit>,
}

impl EditSet {
    pub fn len(&self) -> usize {
        self.edits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Edit> {
        self.edits.iter()
    }

    /// Drops edits whose replacement is non-empty and made only of tokens
    /// outside `vocab` (or the unk symbol itself).
    pub fn without_unk(&self, vocab: &Vocabulary) -> Self {
        Self {
            edits: self.edits.iter().filter(|e| !is_unk_edit(e, vocab)).cloned().collect(),
        }
    }
}

fn is_unk_edit(e: &Edit, vocab: &Vocabulary) -> bool {
    !e.replacement.is_empty() && e.replacement.iter().all(|t| t == UNK_TOKEN || !vocab.contains(t))
}

/// Minimal edit script from `src` to `other`, with contiguous non-keep
/// operations merged into one edit.
pub fn extract_edits(src: &[String], other: &[String]) -> EditSet {
    let mut edits = BTreeSet::new();
    let (mut i, mut j) = (0, 0);
    let mut open: Option<Edit> = None;
    for op in edit_script(src, other) {
        if op == EditOp::Keep {
            edits.extend(open.take());
            i += 1;
            j += 1;
            continue;
        }
        let e = open.get_or_insert_with(|| Edit {
            start: i,
            end: i,
            replacement: Vec::new(),
        });
        match op {
            EditOp::Sub => {
                e.end += 1;
                e.replacement.push(other[j].clone());
                i += 1;
                j += 1;
            }
            EditOp::Del => {
                e.end += 1;
                i += 1;
            }
            EditOp::Ins => {
                e.replacement.push(other[j].clone());
                j += 1;
            }
            EditOp::Keep => unreachable!(),
        }
    }
    edits.extend(open);
    EditSet { edits }
}

/// True-positive, false-positive and false-negative edit counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl Counts {
    pub fn between(hyp: &EditSet, reference: &EditSet) -> Self {
        let tp = hyp.edits.intersection(&reference.edits).count();
        Self {
            tp,
            fp: hyp.len() - tp,
            fn_: reference.len() - tp,
        }
    }

    /// Precision is 0 without proposed edits, recall 0 without reference edits.
    pub fn scores(&self) -> Scores {
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        Scores {
            precision: p,
            recall: r,
            f05: f_beta(p, r, 0.5),
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
}

/// `(1 + b²) P R / (b² P + R)`, 0 when `P = R = 0`.
pub fn f_beta(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / den
    }
}

pub fn f_half(p: f64, r: f64) -> f64 {
    f_beta(p, r, 0.5)
}

/// Corpus-level scores with micro-averaged counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub counts: Counts,
    pub scores: Scores,
    pub sentences: usize,
    /// Neither the hypotheses nor the chosen references contain an edit.
    pub no_edits: bool,
    /// Annotator chosen for each sentence.
    pub chosen: Vec<usize>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sentences={}", self.sentences)?;
        writeln!(f, "tp={} fp={} fn={}", self.counts.tp, self.counts.fp, self.counts.fn_)?;
        writeln!(f, "precision={:.4}", self.scores.precision)?;
        writeln!(f, "recall={:.4}", self.scores.recall)?;
        write!(f, "f0.5={:.4}", self.scores.f05)?;
        if self.no_edits {
            write!(f, "\nstatus=no edits")?;
        }
        Ok(())
    }
}

/// Scores hypotheses against one or more annotators. `refs[a][s]` is
/// annotator `a`'s correction of sentence `s`. Each sentence uses the
/// annotator whose edits give that sentence the best F0.5, preferring more
/// true positives and then fewer misses.
pub fn score_corpus(src: &[Vec<String>], hyp: &[Vec<String>], refs: &[Vec<Vec<String>>], exclude_unk: Option<&Vocabulary>) -> Result<Report> {
    if refs.is_empty() {
        return Err(Error::Contract("at least one reference annotation is required".into()));
    }
    if hyp.len() != src.len() || refs.iter().any(|r| r.len() != src.len()) {
        return Err(Error::Contract(format!(
            "sentence counts differ: src {}, hyp {}, refs {:?}",
            src.len(),
            hyp.len(),
            refs.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let filter = |e: EditSet| match exclude_unk {
        Some(v) => e.without_unk(v),
        None => e,
    };
    let mut total = Counts::default();
    let mut chosen = Vec::with_capacity(src.len());
    let mut any_edit = false;
    for (s, (x, h)) in src.iter().zip(hyp).enumerate() {
        let he = filter(extract_edits(x, h));
        let mut best: Option<(usize, Counts, EditSet)> = None;
        for (a, r) in refs.iter().enumerate() {
            let re = filter(extract_edits(x, &r[s]));
            let c = Counts::between(&he, &re);
            let better = match &best {
                None => true,
                Some((_, bc, _)) => {
                    let (f, bf) = (c.scores().f05, bc.scores().f05);
                    f > bf || (f == bf && (c.tp > bc.tp || (c.tp == bc.tp && c.fn_ < bc.fn_)))
                }
            };
            if better {
                best = Some((a, c, re));
            }
        }
        let (a, c, re) = best.expect("refs is non-empty");
        any_edit |= !he.is_empty() || !re.is_empty();
        total = total + c;
        chosen.push(a);
    }
    Ok(Report {
        counts: total,
        scores: total.scores(),
        sentences: src.len(),
        no_edits: !any_edit,
        chosen,
    })
}

/// [`score_corpus`] with out-of-vocabulary replacements removed from both
/// hypothesis and reference edits.
pub fn score_excluding_unk(src: &[Vec<String>], hyp: &[Vec<String>], refs: &[Vec<Vec<String>>], vocab: &Vocabulary) -> Result<Report> {
    score_corpus(src, hyp, refs, Some(vocab))
}

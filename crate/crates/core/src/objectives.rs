//! Training objectives: edit-weighted cross-entropy over the mixed
//! distribution, the token labeling loss, and the sentence-level copying task.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::copy::MixedDistribution;
use crate::corpus::{SentencePair, Vocabulary, EOS, PAD, SPECIALS, UNK};
use crate::error::{Error, Result};
use crate::model::{CopyGecModel, EncoderStates, ForwardOutput, Graph, IdBatch};
use crate::tensor::Var;

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// One step of a token-level edit script turning a source into a target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditOp {
    Keep,
    Sub,
    Del,
    Ins,
}

/// Unit-cost Levenshtein distance between token sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Minimal edit script, ties broken keep > substitute > delete > insert at
/// every step from the left.
pub fn edit_script<T: PartialEq>(src: &[T], trg: &[T]) -> Vec<EditOp> {
    let (n, m) = (src.len(), trg.len());
    // d[i][j]: distance between src[i..] and trg[j..]
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            d[i * w + j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let sub = d[(i + 1) * w + j + 1] + usize::from(src[i] != trg[j]);
                sub.min(d[(i + 1) * w + j] + 1).min(d[i * w + j + 1] + 1)
            };
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let here = d[i * w + j];
        if i < n && j < m && src[i] == trg[j] && d[(i + 1) * w + j + 1] == here {
            ops.push(EditOp::Keep);
            i += 1;
            j += 1;
        } else if i < n && j < m && d[(i + 1) * w + j + 1] + 1 == here {
            ops.push(EditOp::Sub);
            i += 1;
            j += 1;
        } else if i < n && d[(i + 1) * w + j] + 1 == here {
            ops.push(EditOp::Del);
            i += 1;
        } else {
            ops.push(EditOp::Ins);
            j += 1;
        }
    }
    ops
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Right,
    Wrong,
}

impl Label {
    pub fn class(self) -> usize {
        match self {
            Label::Right => 0,
            Label::Wrong => 1,
        }
    }
}

/// Right/wrong label for every source position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLabels {
    pub labels: Vec<Label>,
}

impl TokenLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Source labels (right iff kept by the alignment) and the mask of target
/// positions not produced by a keep.
pub fn align_labels(src: &[String], trg: &[String]) -> (TokenLabels, Vec<bool>) {
    let mut labels = Vec::with_capacity(src.len());
    let mut changed = Vec::with_capacity(trg.len());
    for op in edit_script(src, trg) {
        match op {
            EditOp::Keep => {
                labels.push(Label::Right);
                changed.push(false);
            }
            EditOp::Sub => {
                labels.push(Label::Wrong);
                changed.push(true);
            }
            EditOp::Del => labels.push(Label::Wrong),
            EditOp::Ins => changed.push(true),
        }
    }
    (TokenLabels { labels }, changed)
}

/// Per-position loss weights: `lambda` on changed target tokens, 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct EditWeights {
    pub lambda: f64,
    pub changed_mask: Vec<bool>,
}

impl EditWeights {
    pub fn new(lambda: f64, changed_mask: Vec<bool>) -> Result<Self> {
        if !(lambda >= 1.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a finite value >= 1, got {lambda}")));
        }
        Ok(Self { lambda, changed_mask })
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            lambda: 1.0,
            changed_mask: vec![false; len],
        }
    }

    pub fn weight(&self, t: usize) -> f64 {
        if self.changed_mask.get(t).copied().unwrap_or(false) {
            self.lambda
        } else {
            1.0
        }
    }
}

/// Reference loss over explicit per-step mixtures: returns
/// `(-Σ_t w_t log p_t(y_t), number of clamped terms)`.
pub fn seq_loss_reference(dists: &[MixedDistribution], gold: &[String], weights: &EditWeights, vocab: &Vocabulary) -> Result<(f64, usize)> {
    if dists.len() != gold.len() {
        return Err(Error::Shape {
            op: "seq_loss",
            lhs: vec![dists.len()],
            rhs: vec![gold.len()],
        });
    }
    let mut loss = 0.0;
    let mut clamped = 0;
    for (t, (d, y)) in dists.iter().zip(gold).enumerate() {
        let p = if vocab.contains(y) {
            d.prob(y, vocab)
        } else if d.alpha > 0.0 && d.src_tokens.iter().any(|s| s == y) {
            d.alpha * d.copy_mass(y)
        } else {
            (1.0 - d.alpha) * d.p_gen[UNK] + d.alpha * d.copy_mass(y)
        };
        if p < LOG_FLOOR {
            clamped += 1;
        }
        loss -= weights.weight(t) * p.max(LOG_FLOOR).ln();
    }
    Ok((loss, clamped))
}

/// Padded tensors for one training step.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub src: IdBatch,
    /// `bos y_1 … y_T`, padded.
    pub trg_in: IdBatch,
    /// Vocabulary id scored on the generation path, `[batch * steps]`.
    pub gen_ids: Vec<usize>,
    /// 1 where the generation path may produce the gold token.
    pub gen_mask: Vec<f64>,
    /// 1 where source position `s` carries the gold surface, `[batch * steps * src_len]`.
    pub copy_match: Vec<f64>,
    /// Edit weight per target position, 0 on padding.
    pub weights: Vec<f64>,
    /// `false` for identity pairs of the copying task.
    pub cross_keep: Vec<bool>,
    /// Right/wrong class per source position.
    pub label_class: Vec<usize>,
    /// 1 on labeled, unpadded source positions.
    pub label_mask: Vec<f64>,
    /// Unpadded target positions (eos included).
    pub ntok: usize,
}

impl TrainBatch {
    /// Builds padded tensors. With `copy` off every gold token is scored on
    /// the generation path, OOV tokens as unk.
    pub fn build(pairs: &[&SentencePair], lambda: f64, copy: bool) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let src = IdBatch::from_rows(&pairs.iter().map(|p| p.src_ids.clone()).collect::<Vec<_>>(), PAD)?;
        let trg_in = IdBatch::from_rows(&pairs.iter().map(|p| p.decoder_input()).collect::<Vec<_>>(), PAD)?;
        let (b, t, s) = (pairs.len(), trg_in.len, src.len);
        let mut gen_ids = vec![PAD; b * t];
        let mut gen_mask = vec![0.0; b * t];
        let mut copy_match = vec![0.0; b * t * s];
        let mut weights = vec![0.0; b * t];
        let mut label_class = vec![0; b * s];
        let mut label_mask = vec![0.0; b * s];
        let mut ntok = 0;
        for (bi, p) in pairs.iter().enumerate() {
            let ew = EditWeights::new(lambda, p.changed_mask.clone().unwrap_or_default())?;
            let gold = p.decoder_output_tokens();
            for (ti, y) in gold.iter().enumerate() {
                let row = bi * t + ti;
                let id = if ti == p.trg_ids.len() { EOS } else { p.trg_ids[ti] };
                let in_src = p.src_tokens.iter().any(|x| x == y);
                let oov = id == UNK && y != SPECIALS[UNK];
                gen_ids[row] = id;
                gen_mask[row] = if copy && oov && in_src { 0.0 } else { 1.0 };
                if copy {
                    for (si, x) in p.src_tokens.iter().enumerate() {
                        if x == y {
                            copy_match[row * s + si] = 1.0;
                        }
                    }
                }
                weights[row] = ew.weight(ti);
                ntok += 1;
            }
            if let Some(l) = &p.labels {
                for (si, lab) in l.labels.iter().enumerate() {
                    label_class[bi * s + si] = lab.class();
                    label_mask[bi * s + si] = 1.0;
                }
            }
        }
        Ok(Self {
            src,
            trg_in,
            gen_ids,
            gen_mask,
            copy_match,
            weights,
            cross_keep: pairs.iter().map(|p| !p.is_identity).collect(),
            label_class,
            label_mask,
            ntok,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.trg_in.batch
    }
}

/// Summed sequence loss plus bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct SeqLoss {
    /// `-Σ w_t log p_t`, the quantity to differentiate.
    pub sum: Var,
    pub ntok: usize,
    /// Gold tokens whose mixed probability fell below [`LOG_FLOOR`].
    pub clamped: usize,
}

/// Gold-token probability under the mixture, `[batch, steps]`.
pub fn gold_probability(g: &mut Graph, out: &ForwardOutput, batch: &TrainBatch) -> Result<Var> {
    let (b, t) = (batch.trg_in.batch, batch.trg_in.len);
    let picked = g.tape.gather_last(out.dec.p_gen, &batch.gen_ids)?;
    let gm = g.tape.constant(&[b, t], batch.gen_mask.clone())?;
    let gen = g.tape.mul(picked, gm)?;
    match (&out.copy, out.alpha) {
        (Some(c), Some(alpha)) => {
            let cm = g.tape.constant(&[b, t, batch.src.len], batch.copy_match.clone())?;
            let hits = g.tape.mul(c.p_copy, cm)?;
            let copied = g.tape.sum_last(hits)?;
            let keep = g.tape.one_minus(alpha);
            let a = g.tape.mul(keep, gen)?;
            let c = g.tape.mul(alpha, copied)?;
            g.tape.add(a, c)
        }
        _ => Ok(gen),
    }
}

/// Edit-weighted negative log-likelihood of the gold targets.
pub fn seq_loss(g: &mut Graph, out: &ForwardOutput, batch: &TrainBatch) -> Result<SeqLoss> {
    let (b, t) = (batch.trg_in.batch, batch.trg_in.len);
    let p = gold_probability(g, out, batch)?;
    let clamped = g.tape.value(p).iter().zip(&batch.weights).filter(|(p, w)| **w > 0.0 && **p < LOG_FLOOR).count();
    let lp = g.tape.log_clamped(p, LOG_FLOOR);
    let w = g.tape.constant(&[b, t], batch.weights.clone())?;
    let wl = g.tape.mul(lp, w)?;
    let s = g.tape.sum(wl);
    Ok(SeqLoss {
        sum: g.tape.scale(s, -1.0),
        ntok: batch.ntok,
        clamped,
    })
}

/// Mean two-class cross-entropy of the labeling head over labeled source
/// positions. Returns `None` when the batch carries no labels.
pub fn label_loss(g: &mut Graph, model: &CopyGecModel, enc: &EncoderStates, batch: &TrainBatch) -> Result<Option<Var>> {
    let n: f64 = batch.label_mask.iter().sum();
    if n == 0.0 {
        return Ok(None);
    }
    let logits = model.label_logits(g, enc)?;
    let probs = g.tape.softmax_last(logits)?;
    let picked = g.tape.gather_last(probs, &batch.label_class)?;
    let lp = g.tape.log_clamped(picked, LOG_FLOOR);
    let m = g.tape.constant(&[enc.batch, enc.len], batch.label_mask.clone())?;
    let masked = g.tape.mul(lp, m)?;
    let s = g.tape.sum(masked);
    Ok(Some(g.tape.scale(s, -1.0 / n)))
}

/// Weights of the summed multi-task loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub seq: f64,
    pub label: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self { seq: 1.0, label: 1.0 }
    }
}

impl TaskWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.seq >= 0.0 && self.label >= 0.0 && self.seq.is_finite() && self.label.is_finite()) {
            return Err(Error::Config(format!("task weights must be finite and non-negative, got seq={} label={}", self.seq, self.label)));
        }
        Ok(())
    }
}

/// `w_seq * seq + w_label * label`.
pub fn total_loss(g: &mut Graph, seq: Var, label: Option<Var>, weights: TaskWeights) -> Result<Var> {
    weights.validate()?;
    let s = g.tape.scale(seq, weights.seq);
    match label {
        Some(l) if weights.label > 0.0 => {
            let l = g.tape.scale(l, weights.label);
            g.tape.add(s, l)
        }
        _ => Ok(s),
    }
}

/// Interleaves every edited pair with an identity pair sampled from
/// `pool`, so the batch holds as many identity pairs as edited ones.
pub fn build_copy_task_batch<R: Rng>(edited: &[SentencePair], pool: &[Vec<String>], vocab: &Vocabulary, rng: &mut R) -> Result<Vec<SentencePair>> {
    if pool.is_empty() {
        return Err(Error::Config("sentence copying task needs a non-empty pool of correct sentences".into()));
    }
    let mut out = Vec::with_capacity(2 * edited.len());
    for p in edited {
        out.push(p.clone());
        let s = pool.choose(rng).expect("pool is non-empty");
        out.push(SentencePair::identity(s.clone(), vocab));
    }
    Ok(out)
}

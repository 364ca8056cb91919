//! Length-normalized beam search over the extended vocabulary.

use std::collections::HashMap;
use std::fmt;

use crate::copy::argmax;
use crate::corpus::{Vocabulary, BOS, EOS, PAD, SPECIALS, UNK, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::model::{CopyGecModel, EncoderStates, ForwardOutput, Graph, IdBatch, StepOutput};

/// A (possibly finished) output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Surface tokens after bos; finished hypotheses end with eos.
    pub tokens: Vec<String>,
    /// Ids fed back to the decoder (OOV copies become unk).
    pub ids: Vec<usize>,
    /// Sum of log mixed probabilities.
    pub score: f64,
    pub alpha_trace: Vec<f64>,
    /// Source position with the most copy mass at each step.
    pub copy_trace: Vec<Option<usize>>,
    /// Source position with the most encoder-decoder attention at each step.
    pub attention_trace: Vec<Option<usize>>,
    pub finished: bool,
    /// Set when no hypothesis reached eos within the length limit.
    pub truncated: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Self {
            tokens: Vec::new(),
            ids: Vec::new(),
            score: 0.0,
            alpha_trace: Vec::new(),
            copy_trace: Vec::new(),
            attention_trace: Vec::new(),
            finished: false,
            truncated: false,
        }
    }

    /// Score divided by the number of tokens after bos (eos included).
    pub fn normalized_score(&self) -> f64 {
        if self.tokens.is_empty() {
            self.score
        } else {
            self.score / self.tokens.len() as f64
        }
    }

    /// Tokens without the trailing eos.
    pub fn output(&self) -> &[String] {
        match self.tokens.last() {
            Some(t) if self.finished && t == SPECIALS[EOS] => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Output limit is `factor * source_len + offset` tokens (eos included).
    pub max_len_factor: f64,
    pub max_len_offset: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 12,
            max_len_factor: 1.5,
            max_len_offset: 5,
        }
    }
}

impl DecodeConfig {
    pub fn max_len(&self, src_len: usize) -> usize {
        (self.max_len_factor * src_len as f64).floor() as usize + self.max_len_offset
    }
}

/// Encoder output for one sentence, detached from any graph.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    h: Vec<f64>,
}

impl EncodedSource {
    pub fn new(model: &CopyGecModel, tokens: &[String], vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot decode an empty source".into()));
        }
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Vocab(format!("vocabulary has {} entries but the model expects {}", vocab.len(), model.config.vocab_size)));
        }
        let ids = vocab.encode(tokens);
        let mut g = Graph::eval();
        let enc = model.encode(&mut g, &IdBatch::single(ids.clone())?)?;
        Ok(Self {
            tokens: tokens.to_vec(),
            ids,
            h: g.tape.value(enc.h).to_vec(),
        })
    }

    /// Last-position outputs for each prefix (each starting after bos).
    pub fn step(&self, model: &CopyGecModel, prefixes: &[&[usize]]) -> Result<Vec<StepOutput>> {
        let rows: Vec<Vec<usize>> = prefixes.iter().map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect()).collect();
        let trg = IdBatch::from_rows(&rows, PAD)?;
        let (w, s) = (rows.len(), self.ids.len());
        let mut g = Graph::eval();
        let h = g.tape.constant(&[w, s, model.config.d_model], self.h.repeat(w))?;
        let enc = EncoderStates {
            h,
            pad_mask: vec![false; w * s],
            batch: w,
            len: s,
        };
        let dec = model.decode(&mut g, &trg, Some(&enc), None)?;
        let (copy, alpha) = match model.copy_attention() {
            Some(c) => {
                let sc = c.copy_scores(&mut g, &model.params, dec.h, &enc)?;
                let a = c.balance_factor(&mut g, &model.params, &sc, &enc, model.config.balance_weighting)?;
                (Some(sc), Some(a))
            }
            None => (None, None),
        };
        let out = ForwardOutput {
            enc: Some(enc),
            dec,
            copy,
            alpha,
        };
        Ok(model.collect_last_steps(&g, &out, &trg))
    }
}

/// One continuation of a hypothesis: surface, id fed back, log probability.
#[derive(Debug, Clone)]
struct Candidate {
    surface: String,
    id: usize,
    logp: f64,
}

/// Candidates in a fixed order: vocabulary ids ascending (pad and bos
/// excluded), then out-of-vocabulary source tokens in first-occurrence order.
fn candidates(step: &StepOutput, src: &EncodedSource, vocab: &Vocabulary) -> Vec<Candidate> {
    let alpha = if step.p_copy.is_empty() { 0.0 } else { step.alpha };
    let mut copy_by_id = vec![0.0; vocab.len()];
    let mut oov: Vec<(String, f64)> = Vec::new();
    if alpha > 0.0 {
        for ((tok, &id), &p) in src.tokens.iter().zip(&src.ids).zip(&step.p_copy) {
            if vocab.contains(tok) {
                copy_by_id[id] += p;
            } else if let Some(e) = oov.iter_mut().find(|(t, _)| t == tok) {
                e.1 += p;
            } else {
                oov.push((tok.clone(), p));
            }
        }
    }
    let mut out = Vec::with_capacity(vocab.len() + oov.len());
    for (id, (&g, &c)) in step.p_gen.iter().zip(&copy_by_id).enumerate() {
        if id == PAD || id == BOS {
            continue;
        }
        let p = (1.0 - alpha) * g + alpha * c;
        if p > 0.0 {
            out.push(Candidate {
                surface: vocab.token(id).unwrap_or(UNK_TOKEN).to_string(),
                id,
                logp: p.ln(),
            });
        }
    }
    for (tok, p) in oov {
        let p = alpha * p;
        if p > 0.0 {
            out.push(Candidate { surface: tok, id: UNK, logp: p.ln() });
        }
    }
    out
}

fn extend(h: &Hypothesis, c: &Candidate, step: &StepOutput) -> Hypothesis {
    let mut n = h.clone();
    n.tokens.push(c.surface.clone());
    n.ids.push(c.id);
    n.score += c.logp;
    n.alpha_trace.push(if step.p_copy.is_empty() { 0.0 } else { step.alpha });
    n.copy_trace.push(argmax(&step.p_copy));
    n.attention_trace.push(argmax(&step.cross_attention));
    n.finished = c.id == EOS;
    n
}

/// Beam search returning every finished hypothesis ranked by normalized
/// score. At each step the `width` best continuations overall are kept,
/// where `width` is the beam size minus the hypotheses already finished.
/// Continuations with the same surface tokens are merged, keeping the
/// higher score.
pub fn beam_search(model: &CopyGecModel, src: &EncodedSource, vocab: &Vocabulary, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Config(format!("beam ({beam}) and max_len ({max_len}) must be at least 1")));
    }
    let mut live = vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let width = beam - finished.len();
        if live.is_empty() || width == 0 {
            break;
        }
        let prefixes: Vec<&[usize]> = live.iter().map(|h| h.ids.as_slice()).collect();
        let steps = src.step(model, &prefixes)?;
        let mut pool: Vec<Hypothesis> = Vec::new();
        let mut seen: HashMap<Vec<String>, usize> = HashMap::new();
        for (h, st) in live.iter().zip(&steps) {
            for c in candidates(st, src, vocab) {
                let n = extend(h, &c, st);
                match seen.get(&n.tokens) {
                    Some(&k) if pool[k].score >= n.score => {}
                    Some(&k) => pool[k] = n,
                    None => {
                        seen.insert(n.tokens.clone(), pool.len());
                        pool.push(n);
                    }
                }
            }
        }
        pool.sort_by(|a, b| b.score.total_cmp(&a.score));
        pool.truncate(width);
        live.clear();
        for h in pool {
            if h.finished {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }
    if finished.is_empty() {
        let mut best = live
            .into_iter()
            .max_by(|a, b| a.normalized_score().total_cmp(&b.normalized_score()))
            .ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))?;
        best.truncated = true;
        return Ok(vec![best]);
    }
    finished.sort_by(|a, b| b.normalized_score().total_cmp(&a.normalized_score()));
    Ok(finished)
}

/// Stepwise argmax decoding, ranking continuations exactly as a width-one
/// beam would (first candidate wins ties).
pub fn greedy(model: &CopyGecModel, src: &EncodedSource, vocab: &Vocabulary, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis::root();
    for _ in 0..max_len {
        let st = src.step(model, &[h.ids.as_slice()])?.remove(0);
        let cands = candidates(&st, src, vocab);
        let best = cands
            .iter()
            .fold(None::<&Candidate>, |b, c| match b {
                Some(b) if h.score + b.logp >= h.score + c.logp => Some(b),
                _ => Some(c),
            })
            .ok_or_else(|| Error::Numeric("no candidate with positive probability".into()))?;
        h = extend(&h, best, &st);
        if h.finished {
            return Ok(h);
        }
    }
    h.truncated = true;
    Ok(h)
}

/// Output surface with every unk symbol replaced by the source token that
/// had the most copy mass at that step. Without a copy pathway the unk
/// symbols stay.
pub fn copy_through_unk(hyp: &Hypothesis, src_tokens: &[String]) -> Vec<String> {
    hyp.output()
        .iter()
        .enumerate()
        .map(|(t, tok)| match (tok.as_str(), hyp.copy_trace.get(t).copied().flatten()) {
            (UNK_TOKEN, Some(i)) => src_tokens[i].clone(),
            _ => tok.clone(),
        })
        .collect()
}

/// Decodes one sentence and returns the surface correction and the best
/// hypothesis.
pub fn correct_sentence(model: &CopyGecModel, vocab: &Vocabulary, src: &[String], cfg: &DecodeConfig) -> Result<(Vec<String>, Hypothesis)> {
    let enc = EncodedSource::new(model, src, vocab)?;
    let max_len = cfg.max_len(src.len());
    let best = if cfg.beam == 1 {
        greedy(model, &enc, vocab, max_len)?
    } else {
        beam_search(model, &enc, vocab, cfg.beam, max_len)?.swap_remove(0)
    };
    Ok((copy_through_unk(&best, src), best))
}

/// Corrects every sentence, fanning out over `threads` workers. Output order
/// follows input order.
pub fn correct_corpus(model: &CopyGecModel, vocab: &Vocabulary, sources: &[Vec<String>], cfg: &DecodeConfig, threads: usize) -> Result<Vec<(Vec<String>, Hypothesis)>> {
    let threads = threads.max(1).min(sources.len().max(1));
    if threads == 1 {
        return sources.iter().map(|s| correct_sentence(model, vocab, s, cfg)).collect();
    }
    let chunk = sources.len().div_ceil(threads);
    std::thread::scope(|sc| {
        let handles: Vec<_> = sources.chunks(chunk).map(|part| sc.spawn(move || part.iter().map(|s| correct_sentence(model, vocab, s, cfg)).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("decoding worker panicked")).collect()
    })
}

/// Mean balance factor over every greedy decoding step of every sentence.
pub fn measure_alpha(model: &CopyGecModel, vocab: &Vocabulary, sentences: &[Vec<String>], cfg: &DecodeConfig) -> Result<f64> {
    if model.copy_attention().is_none() {
        return Err(Error::Config("measuring alpha requires a model with the copy pathway".into()));
    }
    if sentences.is_empty() {
        return Err(Error::Contract("alpha needs at least one sentence".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for s in sentences {
        let enc = EncodedSource::new(model, s, vocab)?;
        let h = greedy(model, &enc, vocab, cfg.max_len(s.len()))?;
        sum += h.alpha_trace.iter().sum::<f64>();
        n += h.alpha_trace.len();
    }
    Ok(sum / n as f64)
}

/// Per-step alignment of an output token to source positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRecord {
    pub sentence: usize,
    pub step: usize,
    pub token: String,
    pub copy_source: Option<usize>,
    pub attention_source: Option<usize>,
    pub alpha: f64,
}

impl fmt::Display for AlignmentRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pos = |p: Option<usize>| p.map_or("-".to_string(), |i| i.to_string());
        write!(
            f,
            "sentence={} step={} token={} copy={} attention={} alpha={:.6}",
            self.sentence,
            self.step,
            self.token,
            pos(self.copy_source),
            pos(self.attention_source),
            self.alpha
        )
    }
}

pub fn alignments(sentence: usize, hyp: &Hypothesis) -> Vec<AlignmentRecord> {
    (0..hyp.tokens.len())
        .map(|t| AlignmentRecord {
            sentence,
            step: t,
            token: hyp.tokens[t].clone(),
            copy_source: hyp.copy_trace[t],
            attention_source: hyp.attention_trace[t],
            alpha: hyp.alpha_trace[t],
        })
        .collect()
}

//! Copy attention over source positions and the generation/copy mixture.
//!
//! At every target step the decoder state `h_t` queries the encoder states
//! with a dedicated single-head attention. The normalized scores are the copy
//! distribution over source positions; their value-weighted sum (the copy
//! context) feeds a sigmoid gate `alpha` that balances copying against
//! generating from the fixed vocabulary:
//!
//! `p(w) = (1 - alpha) * p_gen(w) + alpha * sum_{i: src_i = w} p_copy(i)`
//!
//! The extended vocabulary is the fixed vocabulary plus every surface token of
//! the current source, so out-of-vocabulary source words stay scoreable.

use std::collections::BTreeMap;

use rand::Rng;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::layers::{uniform, xavier};
use crate::model::{BalanceWeighting, EncoderStates, Graph, ParamId, ParamStore};
use crate::tensor::{sigmoid, Var};

/// Parameters of the copy pathway. None of them are shared with the
/// encoder-decoder attention layers.
#[derive(Debug, Clone)]
pub struct CopyAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_bal: ParamId,
    pub d_model: usize,
}

/// Copy scores for a batch of target positions.
#[derive(Debug, Clone, Copy)]
pub struct CopyScores {
    /// Scaled raw scores `q_t K^T / sqrt(d)`, `[batch, steps, src_len]`.
    pub raw: Var,
    /// Copy distribution over source positions, `[batch, steps, src_len]`.
    pub p_copy: Var,
    /// Value projections of the encoder states, `[batch, src_len, d]`.
    pub values: Var,
}

impl CopyAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, d_model: usize, rng: &mut R) -> Self {
        Self {
            w_q: store.insert("copy.w_q", xavier(rng, d_model, d_model, &[d_model, d_model])),
            w_k: store.insert("copy.w_k", xavier(rng, d_model, d_model, &[d_model, d_model])),
            w_v: store.insert("copy.w_v", xavier(rng, d_model, d_model, &[d_model, d_model])),
            w_bal: store.insert("copy.w_bal", uniform(rng, (6.0 / (d_model + 1) as f64).sqrt(), &[d_model])),
            d_model,
        }
    }

    /// Single-head copy attention of decoder states `h` (`[batch, steps, d]`)
    /// over the encoder states. Padded source positions get zero mass.
    pub fn copy_scores(&self, g: &mut Graph, store: &ParamStore, h: Var, enc: &EncoderStates) -> Result<CopyScores> {
        if enc.len == 0 {
            return Err(Error::Contract("copy attention over an empty source".into()));
        }
        for b in 0..enc.batch {
            if enc.pad_mask[b * enc.len..(b + 1) * enc.len].iter().all(|&p| p) {
                return Err(Error::Contract(format!("source {b} is entirely padding")));
            }
        }
        let hs = g.tape.shape(h).to_vec();
        if hs.len() != 3 || hs[0] != enc.batch || hs[2] != self.d_model {
            return Err(Error::Shape {
                op: "copy_scores",
                lhs: hs,
                rhs: vec![enc.batch, enc.len, self.d_model],
            });
        }
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        let q = g.tape.matmul(h, wq)?;
        let k = g.tape.matmul(enc.h, wk)?;
        let values = g.tape.matmul(enc.h, wv)?;
        let kt = g.tape.transpose(k)?;
        let scores = g.tape.matmul(q, kt)?;
        let raw = g.tape.scale(scores, 1.0 / (self.d_model as f64).sqrt());
        let masked = g.tape.masked_fill(raw, &enc.pad_mask, &[enc.batch, 1, enc.len])?;
        let p_copy = g.tape.softmax(masked, 2)?;
        Ok(CopyScores { raw, p_copy, values })
    }

    /// `alpha = sigmoid(w_bal · Σ_i a_i v_i)`, `[batch, steps]`.
    pub fn balance_factor(&self, g: &mut Graph, store: &ParamStore, scores: &CopyScores, enc: &EncoderStates, weighting: BalanceWeighting) -> Result<Var> {
        let weights = match weighting {
            BalanceWeighting::Normalized => scores.p_copy,
            BalanceWeighting::Raw => {
                let keep: Vec<f64> = enc.pad_mask.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
                let keep = g.tape.constant(&[enc.batch, 1, enc.len], keep)?;
                g.tape.mul(scores.raw, keep)?
            }
        };
        let context = g.tape.matmul(weights, scores.values)?;
        let w = g.param(store, self.w_bal);
        let gated = g.tape.mul(context, w)?;
        let logit = g.tape.sum_last(gated)?;
        Ok(g.tape.sigmoid(logit))
    }
}

/// Mixture for one decoding step over the extended vocabulary.
#[derive(Debug, Clone)]
pub struct MixedDistribution {
    pub p_gen: Vec<f64>,
    pub p_copy: Vec<f64>,
    pub alpha: f64,
    pub src_tokens: Vec<String>,
}

/// One entry of the extended vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExtendedToken {
    /// Fixed-vocabulary id.
    Vocab(usize),
    /// Source surface form that is not in the fixed vocabulary.
    SourceOov(String),
}

const SIMPLEX_TOL: f64 = 1e-6;

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

impl MixedDistribution {
    /// Validates and assembles a mixture. With copying disabled use `alpha = 0`
    /// and an empty `p_copy`.
    pub fn mix(p_gen: Vec<f64>, p_copy: Vec<f64>, alpha: f64, src_tokens: Vec<String>) -> Result<Self> {
        check_simplex(&p_gen, "p_gen")?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
        }
        if alpha > 0.0 || !p_copy.is_empty() {
            check_simplex(&p_copy, "p_copy")?;
            if p_copy.len() != src_tokens.len() {
                return Err(Error::Shape {
                    op: "mix",
                    lhs: vec![p_copy.len()],
                    rhs: vec![src_tokens.len()],
                });
            }
        }
        Ok(Self {
            p_gen,
            p_copy,
            alpha,
            src_tokens,
        })
    }

    /// Copy mass that lands on `surface`.
    pub fn copy_mass(&self, surface: &str) -> f64 {
        self.p_copy
            .iter()
            .zip(&self.src_tokens)
            .filter(|(_, t)| t.as_str() == surface)
            .map(|(p, _)| *p)
            .sum()
    }

    /// Mixed probability of a surface token. In-vocabulary tokens collect
    /// both generation and copy mass; out-of-vocabulary tokens only copy mass.
    pub fn prob(&self, surface: &str, vocab: &Vocabulary) -> f64 {
        let gen = vocab.get(surface).map_or(0.0, |id| self.p_gen[id]);
        (1.0 - self.alpha) * gen + self.alpha * self.copy_mass(surface)
    }

    /// Mixed probability of every extended-vocabulary entry.
    pub fn extended(&self, vocab: &Vocabulary) -> BTreeMap<ExtendedToken, f64> {
        let mut out = BTreeMap::new();
        for (id, p) in self.p_gen.iter().enumerate() {
            out.insert(ExtendedToken::Vocab(id), (1.0 - self.alpha) * p);
        }
        for (tok, p) in self.src_tokens.iter().zip(&self.p_copy) {
            let key = match vocab.get(tok) {
                Some(id) => ExtendedToken::Vocab(id),
                None => ExtendedToken::SourceOov(tok.clone()),
            };
            *out.entry(key).or_insert(0.0) += self.alpha * p;
        }
        out
    }

    pub fn total_mass(&self, vocab: &Vocabulary) -> f64 {
        self.extended(vocab).values().sum()
    }

    /// Source position receiving the most copy mass.
    pub fn argmax_copy(&self) -> Option<usize> {
        argmax(&self.p_copy)
    }
}

pub(crate) fn argmax(p: &[f64]) -> Option<usize> {
    p.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Scalar reference for the gate: `sigmoid(w · Σ_i a_i v_i)`.
pub fn balance_from_parts(weights: &[f64], values: &[Vec<f64>], w_bal: &[f64]) -> f64 {
    let d = w_bal.len();
    let mut ctx = vec![0.0; d];
    for (a, v) in weights.iter().zip(values) {
        for j in 0..d {
            ctx[j] += a * v[j];
        }
    }
    sigmoid(ctx.iter().zip(w_bal).map(|(c, w)| c * w).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["the", "cat", "sat"].iter().map(|s| s.to_string())).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn alpha_zero_is_generation_only() {
        let v = vocab();
        let p_gen = vec![0.1, 0.1, 0.1, 0.1, 0.2, 0.3, 0.1];
        let m = MixedDistribution::mix(p_gen.clone(), vec![0.5, 0.5], 0.0, toks("cat Zyx")).unwrap();
        for (id, p) in p_gen.iter().enumerate() {
            assert_eq!(m.prob(v.token(id).unwrap(), &v), *p);
        }
        assert_eq!(m.prob("Zyx", &v), 0.0);
    }

    #[test]
    fn alpha_one_single_oov_source() {
        let v = vocab();
        let p_gen = vec![1.0 / 7.0; 7];
        let m = MixedDistribution::mix(p_gen, vec![1.0], 1.0, toks("Zyx")).unwrap();
        assert_eq!(m.prob("Zyx", &v), 1.0);
        for id in 0..v.len() {
            assert_eq!(m.prob(v.token(id).unwrap(), &v), 0.0);
        }
    }

    #[test]
    fn copy_mass_adds_to_generation_for_in_vocab_source() {
        let v = vocab();
        let mut p_gen = vec![0.0; 7];
        p_gen[v.get("cat").unwrap()] = 0.5;
        p_gen[v.get("sat").unwrap()] = 0.5;
        let m = MixedDistribution::mix(p_gen, vec![0.25, 0.75], 0.4, toks("cat cat")).unwrap();
        assert!((m.prob("cat", &v) - (0.6 * 0.5 + 0.4)).abs() < 1e-15);
        assert!((m.total_mass(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_simplex() {
        assert!(MixedDistribution::mix(vec![0.5, 0.4], vec![], 0.0, vec![]).is_err());
        assert!(MixedDistribution::mix(vec![1.0], vec![0.5, 0.6], 0.5, toks("a b")).is_err());
        assert!(MixedDistribution::mix(vec![1.0], vec![1.0], 1.5, toks("a")).is_err());
    }

    #[test]
    fn balance_reference_is_half_at_zero_gate() {
        let a = balance_from_parts(&[0.3, 0.7], &[vec![1.0, 2.0], vec![-3.0, 4.0]], &[0.0, 0.0]);
        assert_eq!(a, 0.5);
    }
}

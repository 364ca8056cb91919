use copygec::copy::{ExtendedToken, MixedDistribution};
use copygec::corpus::{Vocabulary, BOS, EOS, PAD, UNK};
use copygec::decode::{beam_search, greedy, EncodedSource};
use copygec::model::{CopyGecModel, IdBatch};
use rand::Rng;

use super::{rng, tiny_config};

/// Number of inputs on which a width-one beam and greedy decoding disagree
/// (tokens or score).
pub fn beam_one_vs_greedy(inputs: usize) -> usize {
    let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_tokens(words.clone()).unwrap();
    let mut r = rng(77);
    let mut mismatches = 0;
    for k in 0..inputs {
        let model = CopyGecModel::new(tiny_config(vocab.len()), k as u64 % 7).unwrap();
        let n = r.random_range(1..7);
        let src: Vec<String> = (0..n).map(|_| if r.random_bool(0.2) { format!("Zz{}", r.random_range(0..2)) } else { words[r.random_range(0..words.len())].clone() }).collect();
        let enc = EncodedSource::new(&model, &src, &vocab).unwrap();
        let max_len = r.random_range(1..9);
        let b = beam_search(&model, &enc, &vocab, 1, max_len).unwrap().remove(0);
        let g = greedy(&model, &enc, &vocab, max_len).unwrap();
        if b.tokens != g.tokens || b.score != g.score || b.truncated != g.truncated {
            mismatches += 1;
        }
    }
    mismatches
}

/// Every eos-terminated output of at most `max_len` tokens with its total
/// log probability, enumerated through full forward passes.
pub fn exhaustive(model: &CopyGecModel, vocab: &Vocabulary, src: &[String], max_len: usize) -> Vec<(Vec<String>, f64)> {
    let src_batch = IdBatch::single(vocab.encode(src)).unwrap();
    let mut done = Vec::new();
    let mut frontier: Vec<(Vec<String>, Vec<usize>, f64)> = vec![(Vec::new(), Vec::new(), 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (toks, ids, score) in frontier {
            let prefix: Vec<usize> = std::iter::once(BOS).chain(ids.iter().copied()).collect();
            let st = model.decode_step(&src_batch, &IdBatch::single(prefix).unwrap()).unwrap().remove(0);
            let mix = MixedDistribution::mix(st.p_gen, st.p_copy, st.alpha, src.to_vec()).unwrap();
            for (tok, p) in mix.extended(vocab) {
                let (surface, id) = match tok {
                    ExtendedToken::Vocab(id) if id == PAD || id == BOS => continue,
                    ExtendedToken::Vocab(id) => (vocab.token(id).unwrap().to_string(), id),
                    ExtendedToken::SourceOov(s) => (s, UNK),
                };
                if p <= 0.0 {
                    continue;
                }
                let mut t = toks.clone();
                t.push(surface);
                let mut i = ids.clone();
                i.push(id);
                if id == EOS {
                    done.push((t, score + p.ln()));
                } else {
                    next.push((t, i, score + p.ln()));
                }
            }
        }
        frontier = next;
    }
    done
}

pub struct ExhaustiveOutcome {
    pub cases: usize,
    pub best_mismatches: usize,
    pub set_mismatches: usize,
    pub worst_score_gap: f64,
}

/// Full-width beam against exhaustive enumeration for `max_len` 1 to 3.
pub fn beam_vs_exhaustive(cases: usize) -> ExhaustiveOutcome {
    let words: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let vocab = Vocabulary::from_tokens(words.clone()).unwrap();
    let mut r = rng(91);
    let mut out = ExhaustiveOutcome {
        cases,
        best_mismatches: 0,
        set_mismatches: 0,
        worst_score_gap: 0.0,
    };
    for k in 0..cases {
        let model = CopyGecModel::new(tiny_config(vocab.len()), 100 + k as u64).unwrap();
        let n = r.random_range(1..4);
        let mut src: Vec<String> = (0..n).map(|_| words[r.random_range(0..3)].clone()).collect();
        src.push("Oov".to_string());
        let max_len = 1 + k % 3;
        let enc = EncodedSource::new(&model, &src, &vocab).unwrap();
        let beam = beam_search(&model, &enc, &vocab, 10_000, max_len).unwrap();
        let mut all = exhaustive(&model, &vocab, &src, max_len);
        all.sort_by(|a, b| (b.1 / b.0.len() as f64).total_cmp(&(a.1 / a.0.len() as f64)));
        if beam[0].tokens != all[0].0 {
            out.best_mismatches += 1;
        }
        if beam.len() != all.len() || beam.iter().zip(&all).any(|(h, (t, _))| &h.tokens != t) {
            out.set_mismatches += 1;
        }
        for (h, (_, s)) in beam.iter().zip(&all) {
            out.worst_score_gap = out.worst_score_gap.max((h.score - s).abs());
        }
    }
    out
}

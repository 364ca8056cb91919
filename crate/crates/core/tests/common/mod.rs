#![allow(dead_code)]

pub mod audit;
pub mod beam;
pub mod grad;
pub mod pipeline;
pub mod props;

use copygec::corpus::{SentencePair, Vocabulary};
use copygec::model::{Graph, ModelConfig, ParamId, ParamStore};
use copygec::tensor::Var;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 24,
        dropout: 0.0,
        vocab_size,
        max_positions: 64,
        ..ModelConfig::default()
    }
}

pub fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 64,
        dropout: 0.0,
        vocab_size,
        max_positions: 64,
        ..ModelConfig::default()
    }
}

/// Gradient norm below which errors are measured absolutely (a tensor whose
/// true gradient vanishes leaves only finite-difference round-off).
pub const GRAD_FLOOR: f64 = 1e-5;

/// Worst per-tensor relative error between backpropagated gradients and
/// central finite differences, `||a - n|| / max(||a||, ||n||, GRAD_FLOOR)`.
///
/// `only` restricts the check to parameters whose name satisfies it.
pub fn gradient_check(store: &mut ParamStore, only: impl Fn(&str) -> bool, f: impl Fn(&mut Graph, &ParamStore) -> Var) -> (f64, String) {
    let h = 1e-5;
    store.zero_grad();
    let mut g = Graph::eval();
    let loss = f(&mut g, store);
    g.backward_into(loss, store).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let name = store.name(id).to_string();
        if !only(&name) {
            continue;
        }
        let analytic: Vec<f64> = store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let mut gp = Graph::eval();
            let lp = f(&mut gp, store);
            let up = gp.tape.scalar_value(lp);
            store.get_mut(id).data_mut()[k] = orig - h;
            let mut gm = Graph::eval();
            let lm = f(&mut gm, store);
            let down = gm.tape.scalar_value(lm);
            store.get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(GRAD_FLOOR);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel.max(worst.0), if rel >= worst.0 { name } else { worst.1 });
        }
    }
    store.zero_grad();
    worst
}

/// Finite-difference gradient of `f` with respect to a free input tensor.
pub fn numeric_input_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|k| {
            buf[k] = x[k] + h;
            let up = f(&buf);
            buf[k] = x[k] - h;
            let down = f(&buf);
            buf[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(GRAD_FLOOR)
}

/// Small agreement grammar: `det [adj] noun verb det [adj] noun [prep det noun] .`
pub struct Grammar {
    pub sing: Vec<&'static str>,
    pub plur: Vec<&'static str>,
    pub verb_s: Vec<&'static str>,
    pub verb_p: Vec<&'static str>,
    pub adj: Vec<&'static str>,
    pub prep: Vec<&'static str>,
}

impl Default for Grammar {
    fn default() -> Self {
        Self {
            sing: vec!["cat", "dog", "bird", "man", "child", "teacher"],
            plur: vec!["cats", "dogs", "birds", "men", "children", "teachers"],
            verb_s: vec!["sees", "likes", "finds", "helps"],
            verb_p: vec!["see", "like", "find", "help"],
            adj: vec!["big", "small", "old", "happy"],
            prep: vec!["in", "near", "behind"],
        }
    }
}

impl Grammar {
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<&str> = vec!["the", "a", "some", "."];
        for l in [&self.sing, &self.plur, &self.verb_s, &self.verb_p, &self.adj, &self.prep] {
            w.extend(l.iter().copied());
        }
        w.into_iter().map(String::from).collect()
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.words()).unwrap()
    }

    fn np<R: Rng>(&self, rng: &mut R, out: &mut Vec<String>) -> bool {
        let plural = rng.random_bool(0.5);
        out.push(if plural { if rng.random_bool(0.5) { "some" } else { "the" } } else if rng.random_bool(0.5) { "a" } else { "the" }.to_string());
        if rng.random_bool(0.4) {
            out.push(self.adj[rng.random_range(0..self.adj.len())].to_string());
        }
        let k = rng.random_range(0..self.sing.len());
        out.push(if plural { self.plur[k] } else { self.sing[k] }.to_string());
        plural
    }

    /// A grammatical sentence. `subject` overrides the first noun phrase.
    pub fn sentence<R: Rng>(&self, rng: &mut R, subject: Option<(&str, bool)>) -> Vec<String> {
        let mut s = Vec::new();
        let plural = match subject {
            Some((name, plural)) => {
                s.push(name.to_string());
                plural
            }
            None => self.np(rng, &mut s),
        };
        let v = rng.random_range(0..self.verb_s.len());
        s.push(if plural { self.verb_p[v] } else { self.verb_s[v] }.to_string());
        self.np(rng, &mut s);
        if rng.random_bool(0.3) {
            s.push(self.prep[rng.random_range(0..self.prep.len())].to_string());
            s.push("the".into());
            let k = rng.random_range(0..self.sing.len());
            s.push(self.sing[k].to_string());
        }
        s.push(".".into());
        s
    }

    /// Verb agreement and article errors injected into a clean sentence.
    pub fn corrupt<R: Rng>(&self, clean: &[String], rng: &mut R) -> Vec<String> {
        let mut out = clean.to_vec();
        let mut changed = false;
        while !changed {
            for t in out.iter_mut() {
                if let Some(i) = self.verb_s.iter().position(|v| v == t) {
                    if rng.random_bool(0.6) {
                        *t = self.verb_p[i].to_string();
                        changed = true;
                    }
                } else if let Some(i) = self.verb_p.iter().position(|v| v == t) {
                    if rng.random_bool(0.6) {
                        *t = self.verb_s[i].to_string();
                        changed = true;
                    }
                } else if t == "a" && rng.random_bool(0.3) {
                    *t = "some".into();
                    changed = true;
                }
            }
        }
        out
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pairs_from(tokens: &[(Vec<String>, Vec<String>)], vocab: &Vocabulary) -> Vec<SentencePair> {
    tokens.iter().map(|(s, t)| SentencePair::new(s.clone(), t.clone(), vocab)).collect()
}

/// Pronounceable surface form that is not an English-looking vocabulary word.
pub fn oov_name<R: Rng>(rng: &mut R) -> String {
    let cons = b"bdfgklmnprstvz";
    let vow = b"aeiou";
    let mut s = String::from("Z");
    for k in 0..4 {
        let set: &[u8] = if k % 2 == 0 { vow } else { cons };
        s.push(set[rng.random_range(0..set.len())] as char);
    }
    s
}

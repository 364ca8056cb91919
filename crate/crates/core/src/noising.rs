//! Synthetic corruption of clean sentences for denoising pretraining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{TokenPair, Vocabulary, SPECIALS};
use crate::error::{Error, Result};
use crate::objectives::{edit_script, EditOp};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub p_delete: f64,
    pub p_insert: f64,
    pub p_replace: f64,
    pub shuffle_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p_delete: 0.1,
            p_insert: 0.1,
            p_replace: 0.1,
            shuffle_sigma: 0.5,
            seed: 42,
        }
    }
}

impl NoiseConfig {
    /// No corruption at all.
    pub fn identity(seed: u64) -> Self {
        Self {
            p_delete: 0.0,
            p_insert: 0.0,
            p_replace: 0.0,
            shuffle_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_delete", self.p_delete), ("p_insert", self.p_insert), ("p_replace", self.p_replace)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.shuffle_sigma >= 0.0 && self.shuffle_sigma.is_finite()) {
            return Err(Error::Config(format!("shuffle_sigma must be finite and >= 0, got {}", self.shuffle_sigma)));
        }
        Ok(())
    }
}

/// Operations that fired while corrupting one sentence, with the number of
/// trials each one had.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NoiseTrace {
    pub delete_trials: usize,
    pub deleted: usize,
    pub insert_trials: usize,
    pub inserted: usize,
    pub replace_trials: usize,
    pub replaced: usize,
}

impl std::ops::Add for NoiseTrace {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            delete_trials: self.delete_trials + o.delete_trials,
            deleted: self.deleted + o.deleted,
            insert_trials: self.insert_trials + o.insert_trials,
            inserted: self.inserted + o.inserted,
            replace_trials: self.replace_trials + o.replace_trials,
            replaced: self.replaced + o.replaced,
        }
    }
}

impl NoiseTrace {
    pub fn rates(&self) -> (f64, f64, f64) {
        let r = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        (r(self.deleted, self.delete_trials), r(self.inserted, self.insert_trials), r(self.replaced, self.replace_trials))
    }
}

/// Generator for sentence `index` under `seed`; independent of every other
/// sentence's stream.
pub fn sentence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn is_special(t: &str) -> bool {
    SPECIALS.contains(&t)
}

/// Delete, insert per gap, replace, then shuffle by jittered positions.
/// Tokens for insertion and replacement are drawn from `pool`.
///
/// A sentence whose every token was deleted with nothing inserted comes back
/// unchanged, with an empty trace.
pub fn corrupt_traced<R: Rng>(clean: &[String], cfg: &NoiseConfig, pool: &[String], rng: &mut R) -> Result<(Vec<String>, NoiseTrace)> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(Error::Contract("cannot corrupt an empty sentence".into()));
    }
    if pool.is_empty() && (cfg.p_insert > 0.0 || cfg.p_replace > 0.0) {
        return Err(Error::Config("insertion or replacement needs a non-empty vocabulary".into()));
    }
    let mut tr = NoiseTrace::default();

    let mut kept = Vec::with_capacity(clean.len());
    for t in clean {
        tr.delete_trials += 1;
        if rng.random_bool(cfg.p_delete) {
            tr.deleted += 1;
        } else {
            kept.push(t.clone());
        }
    }

    let mut grown = Vec::with_capacity(kept.len() + 4);
    for gap in 0..=kept.len() {
        tr.insert_trials += 1;
        if rng.random_bool(cfg.p_insert) {
            tr.inserted += 1;
            grown.push(pool[rng.random_range(0..pool.len())].clone());
        }
        if let Some(t) = kept.get(gap) {
            grown.push(t.clone());
        }
    }

    for t in grown.iter_mut() {
        if is_special(t) {
            continue;
        }
        tr.replace_trials += 1;
        if rng.random_bool(cfg.p_replace) {
            tr.replaced += 1;
            *t = pool[rng.random_range(0..pool.len())].clone();
        }
    }

    let out = if cfg.shuffle_sigma > 0.0 && grown.len() > 1 {
        let normal = Normal::new(0.0, cfg.shuffle_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut keyed: Vec<(f64, String)> = grown.into_iter().enumerate().map(|(i, t)| (i as f64 + normal.sample(rng), t)).collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        keyed.into_iter().map(|(_, t)| t).collect()
    } else {
        grown
    };

    if out.is_empty() {
        return Ok((clean.to_vec(), NoiseTrace::default()));
    }
    Ok((out, tr))
}

pub fn corrupt<R: Rng>(clean: &[String], cfg: &NoiseConfig, pool: &[String], rng: &mut R) -> Result<Vec<String>> {
    corrupt_traced(clean, cfg, pool, rng).map(|(s, _)| s)
}

/// `(corrupted, clean)` pairs for every sentence, sentence `i` corrupted
/// with [`sentence_rng`]`(cfg.seed, i)`. Work is split over `threads`
/// workers without affecting the output.
pub fn make_pretrain_corpus(clean: &[Vec<String>], cfg: &NoiseConfig, vocab: &Vocabulary, threads: usize) -> Result<(Vec<TokenPair>, NoiseTrace)> {
    cfg.validate()?;
    let pool = vocab.regular_tokens();
    let one = |i: usize| -> Result<(TokenPair, NoiseTrace)> {
        let mut rng = sentence_rng(cfg.seed, i as u64);
        let (c, tr) = corrupt_traced(&clean[i], cfg, pool, &mut rng)?;
        Ok(((c, clean[i].clone()), tr))
    };
    let threads = threads.max(1).min(clean.len().max(1));
    let results: Vec<Result<(TokenPair, NoiseTrace)>> = if threads == 1 {
        (0..clean.len()).map(one).collect()
    } else {
        let chunk = clean.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let one = &one;
                    s.spawn(move || (w * chunk..((w + 1) * chunk).min(clean.len())).map(one).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("noising worker panicked")).collect()
        })
    };
    let mut pairs = Vec::with_capacity(clean.len());
    let mut total = NoiseTrace::default();
    for r in results {
        let (p, tr) = r?;
        pairs.push(p);
        total = total + tr;
    }
    Ok((pairs, total))
}

/// Observed corruption statistics of a `(corrupted, clean)` corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStats {
    /// Deletions per clean token.
    pub delete_rate: f64,
    /// Insertions per gap of the clean sentences.
    pub insert_rate: f64,
    /// Substitutions per clean token.
    pub replace_rate: f64,
    /// Mean token Levenshtein distance per sentence.
    pub mean_distance: f64,
    /// Fraction of tokens moved by 0, 1, 2 and 3 or more positions, over
    /// pairs that are permutations of distinct tokens.
    pub displacement: [f64; 4],
    pub permuted_tokens: usize,
}

impl NoiseStats {
    pub fn displaced_fraction(&self) -> f64 {
        1.0 - self.displacement[0]
    }
}

/// Rates come from a minimal edit script from clean to corrupted, so
/// shuffled tokens show up as edits too; isolate operations to audit them.
pub fn audit_noise(pairs: &[TokenPair]) -> NoiseStats {
    let (mut del, mut ins, mut sub, mut tokens, mut gaps, mut dist) = (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    let mut hist = [0usize; 4];
    let mut permuted = 0;
    for (corrupted, clean) in pairs {
        tokens += clean.len();
        gaps += clean.len() + 1;
        for op in edit_script(clean, corrupted) {
            match op {
                EditOp::Del => del += 1,
                EditOp::Ins => ins += 1,
                EditOp::Sub => sub += 1,
                EditOp::Keep => continue,
            }
            dist += 1;
        }
        if let Some(moves) = displacements(clean, corrupted) {
            for m in moves {
                hist[m.min(3)] += 1;
                permuted += 1;
            }
        }
    }
    let r = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    NoiseStats {
        delete_rate: r(del, tokens),
        insert_rate: r(ins, gaps),
        replace_rate: r(sub, tokens),
        mean_distance: r(dist, pairs.len()),
        displacement: hist.map(|h| r(h, permuted)),
        permuted_tokens: permuted,
    }
}

/// Per-token displacement when `after` is a permutation of `before` and
/// `before` has no repeated token.
fn displacements(before: &[String], after: &[String]) -> Option<Vec<usize>> {
    if before.len() != after.len() {
        return None;
    }
    let mut pos = std::collections::HashMap::with_capacity(before.len());
    for (i, t) in before.iter().enumerate() {
        if pos.insert(t.as_str(), i).is_some() {
            return None;
        }
    }
    after.iter().enumerate().map(|(j, t)| pos.get(t.as_str()).map(|&i| i.abs_diff(j))).collect()
}

use copygec::corpus::Vocabulary;
use copygec::noising::{audit_noise, make_pretrain_corpus, NoiseConfig, NoiseStats, NoiseTrace};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// `n` sentences of `len` distinct tokens drawn from a 1000-word vocabulary.
pub fn audit_corpus(n: usize, len: usize, seed: u64) -> (Vec<Vec<String>>, Vocabulary) {
    let words: Vec<String> = (0..1000).map(|i| format!("v{i}")).collect();
    let vocab = Vocabulary::from_tokens(words.clone()).unwrap();
    let mut r = StdRng::seed_from_u64(seed);
    let clean = (0..n)
        .map(|_| {
            let idx = rand::seq::index::sample(&mut r, words.len(), len);
            idx.iter().map(|i| words[i].clone()).collect()
        })
        .collect();
    (clean, vocab)
}

pub fn run(clean: &[Vec<String>], vocab: &Vocabulary, cfg: &NoiseConfig) -> (NoiseStats, NoiseTrace) {
    let (pairs, trace) = make_pretrain_corpus(clean, cfg, vocab, 1).unwrap();
    (audit_noise(&pairs), trace)
}

/// Displacement histogram (0, 1, 2, ≥3 positions) of re-sorting `len`
/// positions by `i + N(0, sigma)`, simulated independently of the library:
/// Box-Muller normals from a different generator and an argsort.
pub fn simulate_displacement(trials: usize, len: usize, sigma: f64, seed: u64) -> [f64; 4] {
    let mut r = StdRng::seed_from_u64(seed);
    let mut hist = [0usize; 4];
    let mut keys = vec![0.0; len];
    let mut order: Vec<usize> = (0..len).collect();
    for _ in 0..trials {
        for (i, k) in keys.iter_mut().enumerate() {
            let u1: f64 = 1.0 - r.random::<f64>();
            let u2: f64 = r.random();
            *k = i as f64 + sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap());
        for (new_pos, &orig) in order.iter().enumerate() {
            hist[orig.abs_diff(new_pos).min(3)] += 1;
        }
    }
    let total = (trials * len) as f64;
    hist.map(|h| h as f64 / total)
}

pub struct AuditOutcome {
    /// Rates from the corruption trace of the full default configuration.
    pub traced: (f64, f64, f64),
    /// Edit-script rates with each operation run alone.
    pub isolated: (f64, f64, f64),
    pub displacement: [f64; 4],
    pub simulated: [f64; 4],
}

impl AuditOutcome {
    pub fn rates_ok(&self) -> bool {
        let ok = |x: f64| (0.09..=0.11).contains(&x);
        let (a, b, c) = self.traced;
        let (d, e, f) = self.isolated;
        [a, b, c, d, e, f].into_iter().all(ok)
    }

    pub fn worst_bucket_gap(&self) -> f64 {
        self.displacement.iter().zip(&self.simulated).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// 10k sentences of length 20, seed 42.
pub fn noise_audit() -> AuditOutcome {
    let (clean, vocab) = audit_corpus(10_000, 20, 7);
    let full = NoiseConfig { seed: 42, ..NoiseConfig::default() };
    let (_, trace) = run(&clean, &vocab, &full);
    let only = |d: f64, i: f64, r: f64, s: f64| NoiseConfig {
        p_delete: d,
        p_insert: i,
        p_replace: r,
        shuffle_sigma: s,
        seed: 42,
    };
    let (del, _) = run(&clean, &vocab, &only(0.1, 0.0, 0.0, 0.0));
    let (ins, _) = run(&clean, &vocab, &only(0.0, 0.1, 0.0, 0.0));
    let (rep, _) = run(&clean, &vocab, &only(0.0, 0.0, 0.1, 0.0));
    let (shuf, _) = run(&clean, &vocab, &only(0.0, 0.0, 0.0, 0.5));
    AuditOutcome {
        traced: trace.rates(),
        isolated: (del.delete_rate, ins.insert_rate, rep.replace_rate),
        displacement: shuf.displacement,
        simulated: simulate_displacement(20_000, 20, 0.5, 99),
    }
}

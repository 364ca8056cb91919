use copygec::copy::MixedDistribution;
use copygec::corpus::{Vocabulary, BOS};
use copygec::model::{CopyGecModel, IdBatch, ModelConfig};
use copygec::tensor::Tensor;
use rand::Rng;

use super::rng;

pub struct SweepResult {
    pub states: usize,
    pub worst_mass_error: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

/// Mixed distributions from `states` random models, sources (with
/// out-of-vocabulary tokens) and prefixes.
pub fn normalization_sweep(states: usize) -> SweepResult {
    let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_tokens(words.clone()).unwrap();
    let mut r = rng(2024);
    let mut out = SweepResult {
        states,
        worst_mass_error: 0.0,
        alpha_min: f64::INFINITY,
        alpha_max: f64::NEG_INFINITY,
    };
    for s in 0..states {
        let d = [8, 16][s % 2];
        let cfg = ModelConfig {
            d_model: d,
            n_layers: 1 + s % 2,
            n_heads: 2,
            d_ffn: 2 * d,
            dropout: 0.0,
            vocab_size: vocab.len(),
            max_positions: 32,
            ..ModelConfig::default()
        };
        let mut model = CopyGecModel::new(cfg, s as u64).unwrap();
        let gain = r.random_range(0.25..4.0);
        let id = model.params.id("copy.w_bal").unwrap();
        let t = model.params.get(id);
        let scaled = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * gain).collect()).unwrap();
        model.set_param("copy.w_bal", scaled).unwrap();
        let n = r.random_range(1..9);
        let src: Vec<String> = (0..n).map(|_| if r.random_bool(0.3) { format!("oov{}", r.random_range(0..3)) } else { words[r.random_range(0..words.len())].clone() }).collect();
        let mut prefix = vec![BOS];
        prefix.extend((0..r.random_range(0..6)).map(|_| r.random_range(4..vocab.len())));
        let step = model.decode_step(&IdBatch::single(vocab.encode(&src)).unwrap(), &IdBatch::single(prefix).unwrap()).unwrap().remove(0);
        out.alpha_min = out.alpha_min.min(step.alpha);
        out.alpha_max = out.alpha_max.max(step.alpha);
        let mix = MixedDistribution::mix(step.p_gen, step.p_copy, step.alpha, src).unwrap();
        out.worst_mass_error = out.worst_mass_error.max((mix.total_mass(&vocab) - 1.0).abs());
    }
    out
}

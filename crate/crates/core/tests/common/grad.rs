use copygec::corpus::{SentencePair, Vocabulary};
use copygec::model::{CopyGecModel, Graph, ModelConfig};
use copygec::objectives::{label_loss, seq_loss, total_loss, TaskWeights, TrainBatch};
use copygec::tensor::{Tape, Var};
use rand::Rng;

use super::{numeric_input_grad, rel_err, rng, toks};

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One differentiable operation under test: input shapes and value
/// generators plus the expression built from them.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Sampler)>,
    pub f: OpFn,
}

#[derive(Clone, Copy)]
pub enum Sampler {
    Normal,
    Positive,
    /// Away from zero, for kinked functions.
    AwayFromZero,
}

fn sample(s: Sampler, n: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| match s {
            Sampler::Normal => r.random_range(-1.5..1.5),
            Sampler::Positive => r.random_range(0.2..2.0),
            Sampler::AwayFromZero => {
                let m = r.random_range(0.1..1.5);
                if r.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        })
        .collect()
}

fn case(name: &'static str, inputs: Vec<(Vec<usize>, Sampler)>, f: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase { name, inputs, f: Box::new(f) }
}

use Sampler::*;

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add_broadcast", vec![(vec![2, 3, 4], Normal), (vec![4], Normal)], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", vec![(vec![3, 4], Normal), (vec![3, 4], Normal)], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul_broadcast", vec![(vec![2, 3, 4], Normal), (vec![2, 3, 1], Normal)], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", vec![(vec![5], Normal)], |t, v| t.scale(v[0], -2.5)),
        case("add_scalar", vec![(vec![5], Normal)], |t, v| t.add_scalar(v[0], 0.7)),
        case("one_minus", vec![(vec![5], Normal)], |t, v| t.one_minus(v[0])),
        case("log", vec![(vec![6], Positive)], |t, v| t.log(v[0])),
        case("log_clamped", vec![(vec![6], Positive)], |t, v| t.log_clamped(v[0], 1e-12)),
        case("exp", vec![(vec![6], Normal)], |t, v| t.exp(v[0])),
        case("sigmoid", vec![(vec![6], Normal)], |t, v| t.sigmoid(v[0])),
        case("relu", vec![(vec![8], AwayFromZero)], |t, v| t.relu(v[0])),
        case("matmul_2d", vec![(vec![3, 4], Normal), (vec![4, 5], Normal)], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matmul_shared_rhs", vec![(vec![2, 3, 4], Normal), (vec![4, 2], Normal)], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matmul_batched", vec![(vec![2, 3, 4], Normal), (vec![2, 4, 3], Normal)], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("permute", vec![(vec![2, 3, 4], Normal)], |t, v| t.permute(v[0], &[2, 0, 1]).unwrap()),
        case("transpose", vec![(vec![2, 3, 4], Normal)], |t, v| t.transpose(v[0]).unwrap()),
        case("reshape", vec![(vec![2, 6], Normal)], |t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        case("softmax_inner_axis", vec![(vec![2, 4, 3], Normal)], |t, v| t.softmax(v[0], 1).unwrap()),
        case("softmax_last", vec![(vec![3, 5], Normal)], |t, v| t.softmax_last(v[0]).unwrap()),
        case("layer_norm", vec![(vec![3, 6], Normal), (vec![6], Positive), (vec![6], Normal)], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
        case("embedding", vec![(vec![5, 3], Normal)], |t, v| t.embedding(v[0], &[4, 0, 4, 2], &[2, 2]).unwrap()),
        case("dropout_fixed_mask", vec![(vec![10], Normal)], |t, v| {
            let mut r = rng(5);
            t.dropout(v[0], 0.3, true, &mut r).unwrap()
        }),
        case("concat", vec![(vec![2, 2, 3], Normal), (vec![2, 1, 3], Normal)], |t, v| t.concat(&[v[0], v[1]], 1).unwrap()),
        case("gather_last", vec![(vec![3, 4], Normal)], |t, v| t.gather_last(v[0], &[3, 0, 3]).unwrap()),
        case("sum", vec![(vec![2, 3], Normal)], |t, v| t.sum(v[0])),
        case("mean", vec![(vec![2, 3], Normal)], |t, v| t.mean(v[0])),
        case("sum_last", vec![(vec![2, 3, 4], Normal)], |t, v| t.sum_last(v[0]).unwrap()),
        case("masked_softmax", vec![(vec![2, 4], Normal)], |t, v| {
            let m = t.masked_fill(v[0], &[false, true, false, false, false, false, true, true], &[2, 4]).unwrap();
            t.softmax_last(m).unwrap()
        }),
    ]
}

/// Worst relative error over the inputs of `c`, comparing backprop with
/// central differences of `sum(f(x) * r)` for a fixed random projection `r`.
pub fn check_op(c: &OpCase, seed: u64) -> f64 {
    let mut r = rng(seed);
    let xs: Vec<Vec<f64>> = c.inputs.iter().map(|(s, smp)| sample(*smp, s.iter().product(), &mut r)).collect();
    let proj_seed = r.random::<u64>();
    let eval = |xs: &[Vec<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = c.inputs.iter().zip(xs).map(|((s, _), x)| t.variable(s, x.clone()).unwrap()).collect();
        let out = (c.f)(&mut t, &vars);
        let n = t.value(out).len();
        let mut pr = rng(proj_seed);
        let p: Vec<f64> = (0..n).map(|_| pr.random_range(-1.0..1.0)).collect();
        let shape = t.shape(out).to_vec();
        let pv = t.constant(&shape, p).unwrap();
        let m = t.mul(out, pv).unwrap();
        let s = t.sum(m);
        let val = t.scalar_value(s);
        if !grads {
            return (val, Vec::new());
        }
        let g = t.backward(s).unwrap();
        (val, vars.iter().zip(xs).map(|(v, x)| g.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()])).collect())
    };
    let (_, analytic) = eval(&xs, true);
    let mut worst: f64 = 0.0;
    for i in 0..xs.len() {
        let numeric = numeric_input_grad(&xs[i], |xi| {
            let mut all = xs.clone();
            all[i] = xi.to_vec();
            eval(&all, false).0
        });
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Batch exercising every loss path: edited pairs, a source OOV token that
/// can only be copied, an OOV target that cannot, padding and an identity
/// pair with the encoder-decoder attention removed.
pub fn loss_fixture() -> (Vocabulary, Vec<SentencePair>) {
    let vocab = Vocabulary::from_tokens(toks("the cat sat on a mat dog sees .")).unwrap();
    let pairs = vec![
        SentencePair::new(toks("the cat sat on mat"), toks("the cat sat on a mat ."), &vocab),
        SentencePair::new(toks("Zorbo sees the dog"), toks("Zorbo sees a dog ."), &vocab),
        SentencePair::new(toks("a dog sat"), toks("the Quux sat ."), &vocab),
        SentencePair::identity(toks("the mat ."), &vocab),
    ];
    (vocab, pairs)
}

/// Full copy-augmented objective: mean edit-weighted sequence loss plus the
/// labeling loss.
pub fn full_loss(model: &CopyGecModel, g: &mut Graph, batch: &TrainBatch) -> Var {
    let out = model.forward(g, Some(&batch.src), &batch.trg_in, Some(&batch.cross_keep)).unwrap();
    let seq = seq_loss(g, &out, batch).unwrap();
    let mean = g.tape.scale(seq.sum, 1.0 / seq.ntok as f64);
    let label = label_loss(g, model, out.enc.as_ref().unwrap(), batch).unwrap();
    total_loss(g, mean, label, TaskWeights::default()).unwrap()
}

pub fn grad_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 12,
        dropout: 0.0,
        vocab_size,
        max_positions: 16,
        ..ModelConfig::default()
    }
}

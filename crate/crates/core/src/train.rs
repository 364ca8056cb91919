//! Nesterov-momentum training with dev-loss annealing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{batch, load_params_checked, save_checkpoint, SentencePair, Vocabulary, PAD, UNK};
use crate::decode::{correct_corpus, DecodeConfig};
use crate::error::{Error, Result};
use crate::evaluate::score_corpus;
use crate::model::{is_decoder_lm_param, CopyGecModel, Graph, ModelConfig, ParamStore};
use crate::objectives::{build_copy_task_batch, label_loss, seq_loss, total_loss, TaskWeights, TrainBatch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Learning-rate multiplier applied when the dev loss stops improving.
    pub shrink: f64,
    pub min_lr: f64,
    /// Non-improving evaluations tolerated before shrinking.
    pub patience: usize,
    /// L2 penalty coefficient added to the gradient.
    pub l2_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            momentum: 0.99,
            shrink: 0.5,
            min_lr: 1e-4,
            patience: 0,
            l2_decay: 0.0,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.min_lr > 0.0
            && self.min_lr <= self.lr
            && (0.0..1.0).contains(&self.momentum)
            && self.shrink > 0.0
            && self.shrink <= 1.0
            && self.l2_decay >= 0.0
            && self.clip_norm >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Mutable optimizer state persisted in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    /// One velocity buffer per parameter, in parameter order.
    pub velocity: Vec<Vec<f64>>,
    pub best_dev: Option<f64>,
    pub bad_evals: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            velocity: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            best_dev: None,
            bad_evals: 0,
        }
    }

    pub fn header_text(&self) -> String {
        let mut s = format!("step={}\nlr={:e}\nbad_evals={}\n", self.step, self.lr, self.bad_evals);
        if let Some(b) = self.best_dev {
            s.push_str(&format!("best_dev={b:e}\n"));
        }
        s
    }

    pub fn from_header(kv: &BTreeMap<String, String>, velocity: Vec<Vec<f64>>) -> Result<Self> {
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Checkpoint(format!("optimizer header lacks {k}")));
        let bad = |k: &str| Error::Checkpoint(format!("optimizer header has a malformed {k}"));
        Ok(Self {
            step: get("step")?.parse().map_err(|_| bad("step"))?,
            lr: get("lr")?.parse().map_err(|_| bad("lr"))?,
            bad_evals: get("bad_evals")?.parse().map_err(|_| bad("bad_evals"))?,
            best_dev: kv.get("best_dev").map(|v| v.parse().map_err(|_| bad("best_dev"))).transpose()?,
            velocity,
        })
    }
}

/// One Nesterov update in look-ahead form:
/// `v' = μ v - lr g`, `θ' = θ + μ v' - lr g`.
pub fn nag_step(params: &mut ParamStore, state: &mut OptimizerState, cfg: &OptimizerConfig) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Contract(format!("velocity for {} parameters, model has {}", state.velocity.len(), params.len())));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in &ids {
        let t = params.get(*id);
        if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient in {} at step {}", params.name(*id), state.step)));
        }
    }
    let (mu, lr) = (cfg.momentum, state.lr);
    for (k, id) in ids.into_iter().enumerate() {
        let t = params.get_mut(id);
        let Some(grad) = t.grad().map(<[f64]>::to_vec) else { continue };
        let v = &mut state.velocity[k];
        for ((x, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            let g = gi + cfg.l2_decay * *x;
            *vi = mu * *vi - lr * g;
            *x += mu * *vi - lr * g;
        }
    }
    state.step += 1;
    Ok(())
}

/// Learning rate after the latest evaluation in `history`: shrunk once the
/// last `patience + 1` losses all failed to beat the best loss before them.
pub fn anneal(history: &[f64], lr: f64, cfg: &OptimizerConfig) -> f64 {
    let n = history.len();
    let window = cfg.patience + 1;
    if n <= window {
        return lr;
    }
    let best_before = history[..n - window].iter().copied().fold(f64::INFINITY, f64::min);
    if history[n - window..].iter().all(|&l| l >= best_before) {
        (lr * cfg.shrink).max(cfg.min_lr)
    } else {
        lr
    }
}

/// Stateful form of [`anneal`] used by the training loop.
pub fn record_dev_loss(state: &mut OptimizerState, dev_loss: f64, cfg: &OptimizerConfig) {
    match state.best_dev {
        Some(b) if dev_loss >= b => {
            state.bad_evals += 1;
            if state.bad_evals > cfg.patience {
                state.lr = (state.lr * cfg.shrink).max(cfg.min_lr);
                state.bad_evals = 0;
            }
        }
        _ => {
            state.best_dev = Some(dev_loss);
            state.bad_evals = 0;
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(params: &mut ParamStore, max_norm: f64) -> f64 {
    let n = params.grad_norm();
    if max_norm > 0.0 && n > max_norm {
        params.scale_grads(max_norm / n);
    }
    n
}

/// What the decoder is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Source-conditioned correction (or reconstruction of noised input).
    Seq2Seq,
    /// Target-side language modeling with no encoder.
    DecoderLm,
}

/// How finetuning initializes the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Random,
    /// Embeddings and decoder (minus encoder-decoder attention) from a
    /// decoder language model.
    DecoderOnly,
    /// Every parameter from a denoising pretraining run.
    FullDae,
}

impl std::str::FromStr for Init {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Init::Random),
            "decoder-only" | "decoder_only" => Ok(Init::DecoderOnly),
            "full-dae" | "full_dae" => Ok(Init::FullDae),
            _ => Err(Error::Config(format!("unknown init {s:?} (expected random, decoder-only or full-dae)"))),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Init::Random => "random",
            Init::DecoderOnly => "decoder-only",
            Init::FullDae => "full-dae",
        })
    }
}

/// Fresh model for finetuning. Pretrained parameters must come from a model
/// with the same configuration.
pub fn init_model(config: ModelConfig, init: Init, pretrained: Option<&ParamStore>, seed: u64) -> Result<CopyGecModel> {
    let mut model = CopyGecModel::new(config, seed)?;
    match (init, pretrained) {
        (Init::Random, _) => {}
        (_, None) => return Err(Error::Config(format!("init {init} needs a pretrained checkpoint"))),
        (Init::DecoderOnly, Some(p)) => {
            model.load_params_from(p, is_decoder_lm_param)?;
        }
        (Init::FullDae, Some(p)) => load_params_checked(&mut model, p)?,
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Loss multiplier on changed target tokens.
    pub lambda: f64,
    pub task_weights: TaskWeights,
    /// Padded-token budget per batch.
    pub max_tokens: usize,
    pub epochs: usize,
    /// Stop after this many updates even mid-epoch.
    pub max_steps: Option<u64>,
    /// Evaluate every this many updates; 0 evaluates once per pass.
    pub eval_every: u64,
    pub seed: u64,
    /// Pair every edited example with an identity example whose
    /// encoder-decoder attention is removed.
    pub copy_task: bool,
    /// Decode the dev set at each evaluation to report F0.5.
    pub eval_f05: bool,
    pub decode: DecodeConfig,
    pub save_dir: Option<PathBuf>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            lambda: 1.8,
            task_weights: TaskWeights::default(),
            max_tokens: 2048,
            epochs: 1,
            max_steps: None,
            eval_every: 0,
            seed: 7,
            copy_task: false,
            eval_f05: false,
            decode: DecodeConfig { beam: 1, ..DecodeConfig::default() },
            save_dir: None,
            threads: 1,
        }
    }
}

/// Loss figures of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Edit-weighted loss per target token.
    pub loss: f64,
    pub ntok: usize,
    pub clamped: usize,
    pub grad_norm: f64,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Forward, backward, clip and update on one batch.
pub fn train_step(model: &mut CopyGecModel, state: &mut OptimizerState, cfg: &TrainConfig, pairs: &[&SentencePair], objective: Objective) -> Result<StepStats> {
    let copy = model.config.copy_enabled && objective == Objective::Seq2Seq;
    let tb = TrainBatch::build(pairs, cfg.lambda, copy)?;
    let mut g = Graph::train(step_seed(cfg.seed, state.step));
    let out = match objective {
        Objective::Seq2Seq => model.forward(&mut g, Some(&tb.src), &tb.trg_in, Some(&tb.cross_keep))?,
        Objective::DecoderLm => model.forward(&mut g, None, &tb.trg_in, None)?,
    };
    let sl = seq_loss(&mut g, &out, &tb)?;
    let mean = g.tape.scale(sl.sum, 1.0 / sl.ntok as f64);
    let label = match (&out.enc, cfg.task_weights.label > 0.0) {
        (Some(enc), true) => label_loss(&mut g, model, enc, &tb)?,
        _ => None,
    };
    let total = total_loss(&mut g, mean, label, cfg.task_weights)?;
    let loss = g.tape.scalar_value(mean);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {}", state.step)));
    }
    model.params.zero_grad();
    g.backward_into(total, &mut model.params)?;
    let grad_norm = clip_gradients(&mut model.params, cfg.optimizer.clip_norm);
    nag_step(&mut model.params, state, &cfg.optimizer)?;
    model.params.zero_grad();
    Ok(StepStats {
        loss,
        ntok: sl.ntok,
        clamped: sl.clamped,
        grad_norm,
    })
}

/// Plain per-token negative log-likelihood (no edit weighting, no dropout).
pub fn eval_loss(model: &CopyGecModel, pairs: &[SentencePair], max_tokens: usize, objective: Objective) -> Result<f64> {
    let copy = model.config.copy_enabled && objective == Objective::Seq2Seq;
    let b = batch(pairs, max_tokens.max(pairs.iter().map(SentencePair::footprint).max().unwrap_or(1)));
    let (mut sum, mut n) = (0.0, 0usize);
    for idx in &b.batches {
        let refs: Vec<&SentencePair> = idx.iter().map(|&i| &pairs[i]).collect();
        let tb = TrainBatch::build(&refs, 1.0, copy)?;
        let mut g = Graph::eval();
        let out = match objective {
            Objective::Seq2Seq => model.forward(&mut g, Some(&tb.src), &tb.trg_in, Some(&tb.cross_keep))?,
            Objective::DecoderLm => model.forward(&mut g, None, &tb.trg_in, None)?,
        };
        let sl = seq_loss(&mut g, &out, &tb)?;
        sum += g.tape.scalar_value(sl.sum);
        n += sl.ntok;
    }
    if n == 0 {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    Ok(sum / n as f64)
}

/// Teacher-forced fraction of target tokens (eos included) whose argmax
/// over the extended vocabulary is the gold token.
pub fn accuracy(model: &CopyGecModel, pairs: &[SentencePair], max_tokens: usize) -> Result<f64> {
    let copy = model.config.copy_enabled;
    let b = batch(pairs, max_tokens.max(pairs.iter().map(SentencePair::footprint).max().unwrap_or(1)));
    let v = model.config.vocab_size;
    let (mut hit, mut n) = (0usize, 0usize);
    for idx in &b.batches {
        let refs: Vec<&SentencePair> = idx.iter().map(|&i| &pairs[i]).collect();
        let tb = TrainBatch::build(&refs, 1.0, copy)?;
        let mut g = Graph::eval();
        let out = model.forward(&mut g, Some(&tb.src), &tb.trg_in, Some(&tb.cross_keep))?;
        let p_gen = g.tape.value(out.dec.p_gen);
        let p_copy = out.copy.map(|c| g.tape.value(c.p_copy));
        let alpha = out.alpha.map(|a| g.tape.value(a));
        let (t_len, s_len) = (tb.trg_in.len, tb.src.len);
        for (bi, p) in refs.iter().enumerate() {
            for (ti, gold) in p.decoder_output_tokens().iter().enumerate() {
                let row = bi * t_len + ti;
                let a = alpha.map_or(0.0, |a| a[row]);
                let mut mass: Vec<f64> = p_gen[row * v..(row + 1) * v].iter().map(|x| (1.0 - a) * x).collect();
                let mut oov: Vec<(&str, f64)> = Vec::new();
                if let Some(pc) = p_copy {
                    for (si, tok) in p.src_tokens.iter().enumerate() {
                        let m = a * pc[row * s_len + si];
                        match p.src_ids[si] {
                            UNK if tok != crate::corpus::UNK_TOKEN => match oov.iter_mut().find(|(t, _)| *t == tok) {
                                Some(e) => e.1 += m,
                                None => oov.push((tok, m)),
                            },
                            id => mass[id] += m,
                        }
                    }
                }
                mass[PAD] = f64::NEG_INFINITY;
                let (best_id, best_v) = mass.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &m)| if m > b.1 { (i, m) } else { b });
                let best_oov = oov.iter().fold(None::<(&str, f64)>, |b, &(t, m)| match b {
                    Some(bb) if bb.1 >= m => Some(bb),
                    _ => Some((t, m)),
                });
                let gen_id = tb.gen_ids[row];
                let gold_is_copy = tb.gen_mask[row] == 0.0;
                let correct = match best_oov {
                    Some((t, m)) if m > best_v => gold_is_copy && t == gold,
                    _ => !gold_is_copy && best_id == gen_id,
                };
                hit += usize::from(correct);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Contract("accuracy over an empty set".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// One evaluation record of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_f05: Option<f64>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "step={} epoch={} lr={:e} train_loss={:.6} dev_loss={} dev_f05={}",
            self.step,
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.dev_loss),
            opt(self.dev_f05)
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Per-update training losses in order.
    pub losses: Vec<f64>,
    pub clamped: usize,
    /// Training pairs longer than the batch budget.
    pub skipped: usize,
}

/// Dev-set F0.5 of greedy (or beam) corrections against the dev targets.
pub fn dev_f05(model: &CopyGecModel, vocab: &Vocabulary, dev: &[SentencePair], decode: &DecodeConfig, threads: usize) -> Result<f64> {
    let src: Vec<Vec<String>> = dev.iter().map(|p| p.src_tokens.clone()).collect();
    let refs: Vec<Vec<String>> = dev.iter().map(|p| p.trg_tokens.clone()).collect();
    let hyp: Vec<Vec<String>> = correct_corpus(model, vocab, &src, decode, threads)?.into_iter().map(|(s, _)| s).collect();
    Ok(score_corpus(&src, &hyp, &[refs], None)?.scores.f05)
}

/// Runs `cfg.epochs` passes over `train`, evaluating on `dev` and annealing
/// the learning rate on its loss. `pool` supplies correct sentences for the
/// copying task.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut CopyGecModel,
    vocab: &Vocabulary,
    state: &mut OptimizerState,
    train: &[SentencePair],
    dev: &[SentencePair],
    pool: &[Vec<String>],
    cfg: &TrainConfig,
    objective: Objective,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainLog> {
    cfg.optimizer.validate()?;
    cfg.task_weights.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.copy_task && pool.is_empty() {
        return Err(Error::Config("the copying task needs a pool of correct sentences".into()));
    }
    let budget = if cfg.copy_task { cfg.max_tokens / 2 } else { cfg.max_tokens };
    let batches = batch(train, budget);
    if batches.batches.is_empty() {
        return Err(Error::Config(format!("no training pair fits the batch budget of {} tokens", cfg.max_tokens)));
    }
    let mut log = TrainLog {
        skipped: batches.skipped.len(),
        ..TrainLog::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut since_sum, mut since_n) = (0.0, 0usize);
    let mut evaluate = |model: &CopyGecModel, state: &mut OptimizerState, epoch: usize, since_sum: &mut f64, since_n: &mut usize, log: &mut TrainLog| -> Result<()> {
        let dev_loss = if dev.is_empty() { None } else { Some(eval_loss(model, dev, cfg.max_tokens, objective)?) };
        let dev_f = if cfg.eval_f05 && !dev.is_empty() && objective == Objective::Seq2Seq {
            Some(dev_f05(model, vocab, dev, &cfg.decode, cfg.threads)?)
        } else {
            None
        };
        if let Some(l) = dev_loss {
            record_dev_loss(state, l, &cfg.optimizer);
        }
        let rec = LogRecord {
            step: state.step,
            epoch,
            lr: state.lr,
            train_loss: if *since_n == 0 { f64::NAN } else { *since_sum / *since_n as f64 },
            dev_loss,
            dev_f05: dev_f,
        };
        on_record(&rec);
        log.records.push(rec);
        *since_sum = 0.0;
        *since_n = 0;
        if let Some(dir) = &cfg.save_dir {
            save_checkpoint(&dir.join("last.ckpt"), model, vocab, Some(state))?;
        }
        Ok(())
    };
    let done = |state: &OptimizerState| cfg.max_steps.is_some_and(|m| state.step >= m);
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..batches.batches.len()).collect();
        order.shuffle(&mut rng);
        for bi in order {
            if done(state) {
                break 'epochs;
            }
            let edited: Vec<SentencePair>;
            let pairs: Vec<&SentencePair> = if cfg.copy_task {
                let own: Vec<SentencePair> = batches.batches[bi].iter().map(|&i| train[i].clone()).collect();
                edited = build_copy_task_batch(&own, pool, vocab, &mut rng)?;
                edited.iter().collect()
            } else {
                batches.batches[bi].iter().map(|&i| &train[i]).collect()
            };
            let st = train_step(model, state, cfg, &pairs, objective)?;
            log.losses.push(st.loss);
            log.clamped += st.clamped;
            since_sum += st.loss;
            since_n += 1;
            if cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every) {
                evaluate(model, state, epoch, &mut since_sum, &mut since_n, &mut log)?;
            }
        }
        if cfg.eval_every == 0 {
            evaluate(model, state, epoch, &mut since_sum, &mut since_n, &mut log)?;
        }
        if let Some(dir) = &cfg.save_dir {
            save_checkpoint(&dir.join(format!("epoch-{}.ckpt", epoch + 1)), model, vocab, Some(state))?;
        }
    }
    if since_n > 0 || log.records.is_empty() {
        evaluate(model, state, cfg.epochs, &mut since_sum, &mut since_n, &mut log)?;
    }
    Ok(log)
}

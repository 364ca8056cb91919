//! Transformer encoder-decoder with tied embeddings and a copy pathway.

mod config;
pub mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{parse_key_values, BalanceWeighting, ModelConfig};
pub use params::{Bindings, Graph, ParamId, ParamStore};

use crate::copy::{CopyAttention, CopyScores};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};
use layers::{sinusoidal_table, uniform, AttnMask, FeedForward, LayerNorm, Linear, MultiHeadAttention};

/// Rectangular batch of id sequences, right-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct IdBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    /// `true` on padding positions.
    pub pad_mask: Vec<bool>,
}

impl IdBatch {
    pub fn from_rows(rows: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || len == 0 {
            return Err(Error::Contract("empty id batch".into()));
        }
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut pad_mask = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            pad_mask.extend(std::iter::repeat_n(false, r.len()));
            ids.extend(std::iter::repeat_n(pad_id, len - r.len()));
            pad_mask.extend(std::iter::repeat_n(true, len - r.len()));
        }
        Ok(Self {
            ids,
            batch: rows.len(),
            len,
            pad_mask,
        })
    }

    pub fn single(row: Vec<usize>) -> Result<Self> {
        Self::from_rows(&[row], 0)
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

/// Encoder output for a batch, recorded on the current graph.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    /// `[batch, len, d_model]`
    pub h: Var,
    pub pad_mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Decoder output for every target position.
#[derive(Debug, Clone)]
pub struct DecoderStates {
    /// `[batch, steps, d_model]`
    pub h: Var,
    /// Generation distribution `[batch, steps, vocab]`.
    pub p_gen: Var,
    /// Last layer's encoder-decoder attention `[batch, heads, steps, src_len]`,
    /// absent when that attention was removed.
    pub cross_weights: Option<Var>,
}

/// Everything the losses and the decoder need from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub enc: Option<EncoderStates>,
    pub dec: DecoderStates,
    pub copy: Option<CopyScores>,
    /// `[batch, steps]`, present when copying is enabled and a source exists.
    pub alpha: Option<Var>,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    self_attn: MultiHeadAttention,
    ln_attn: LayerNorm,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln_self: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
}

#[derive(Debug, Clone)]
struct Layout {
    embed_src: ParamId,
    embed_trg: ParamId,
    embed_out: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    copy: Option<CopyAttention>,
    label: Linear,
}

/// Copy-augmented Transformer.
#[derive(Debug, Clone)]
pub struct CopyGecModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
    positions: Vec<f64>,
}

/// Parameter-name predicate for the pieces of a model that a decoder-only
/// language-model pretraining run can supply: the tied embeddings and every
/// decoder sublayer except the encoder-decoder attention.
pub fn is_decoder_lm_param(name: &str) -> bool {
    (name.starts_with("embed.") || name.starts_with("decoder.")) && !name.contains(".cross_attn.") && !name.contains(".ln_cross.")
}

impl CopyGecModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, v) = (config.d_model, config.vocab_size);
        let (embed_src, embed_trg, embed_out) = if config.tie_embeddings {
            let e = store.insert("embed.shared", uniform(&mut rng, 0.1, &[v, d]));
            (e, e, e)
        } else {
            (
                store.insert("embed.src", uniform(&mut rng, 0.1, &[v, d])),
                store.insert("embed.trg", uniform(&mut rng, 0.1, &[v, d])),
                store.insert("embed.out", uniform(&mut rng, 0.1, &[v, d])),
            )
        };
        let encoder = (0..config.n_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayer {
                    self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), d, config.n_heads, &mut rng),
                    ln_attn: LayerNorm::new(&mut store, &format!("{p}.ln_attn"), d),
                    ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, config.d_ffn, &mut rng),
                    ln_ffn: LayerNorm::new(&mut store, &format!("{p}.ln_ffn"), d),
                }
            })
            .collect();
        let decoder = (0..config.n_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), d, config.n_heads, &mut rng),
                    ln_self: LayerNorm::new(&mut store, &format!("{p}.ln_self"), d),
                    cross_attn: MultiHeadAttention::new(&mut store, &format!("{p}.cross_attn"), d, config.n_heads, &mut rng),
                    ln_cross: LayerNorm::new(&mut store, &format!("{p}.ln_cross"), d),
                    ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, config.d_ffn, &mut rng),
                    ln_ffn: LayerNorm::new(&mut store, &format!("{p}.ln_ffn"), d),
                }
            })
            .collect();
        let copy = config.copy_enabled.then(|| CopyAttention::new(&mut store, d, &mut rng));
        let label = Linear::new(&mut store, "label", d, 2, true, &mut rng);
        let positions = sinusoidal_table(config.max_positions, d);
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                embed_src,
                embed_trg,
                embed_out,
                encoder,
                decoder,
                copy,
                label,
            },
            positions,
        })
    }

    /// Parameter ids of the source embedding, target embedding and output
    /// projection (all equal when embeddings are tied).
    pub fn embedding_ids(&self) -> [ParamId; 3] {
        [self.layout.embed_src, self.layout.embed_trg, self.layout.embed_out]
    }

    pub fn copy_attention(&self) -> Option<&CopyAttention> {
        self.layout.copy.as_ref()
    }

    pub fn label_head(&self) -> &Linear {
        &self.layout.label
    }

    fn check_ids(&self, ids: &IdBatch) -> Result<()> {
        if let Some(&bad) = ids.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Vocab(format!("id {bad} outside vocabulary of size {}", self.config.vocab_size)));
        }
        if ids.len > self.config.max_positions {
            return Err(Error::Capacity(format!("sequence length {} exceeds max_positions {}", ids.len, self.config.max_positions)));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, table: ParamId, ids: &IdBatch) -> Result<Var> {
        let d = self.config.d_model;
        let w = g.param(&self.params, table);
        let e = g.tape.embedding(w, &ids.ids, &[ids.batch, ids.len])?;
        let e = g.tape.scale(e, (d as f64).sqrt());
        let pos = g.tape.constant(&[ids.len, d], self.positions[..ids.len * d].to_vec())?;
        let x = g.tape.add(e, pos)?;
        g.dropout(x, self.config.dropout)
    }

    /// Runs the encoder stack over `src`.
    pub fn encode(&self, g: &mut Graph, src: &IdBatch) -> Result<EncoderStates> {
        self.check_ids(src)?;
        if src.pad_mask.chunks(src.len).any(|row| row.iter().all(|&p| p)) {
            return Err(Error::Contract("source row consisting only of padding".into()));
        }
        let p = self.config.dropout;
        let mask = AttnMask::padding(&src.pad_mask, src.batch, src.len);
        let mut x = self.embed(g, self.layout.embed_src, src)?;
        for layer in &self.layout.encoder {
            let a = layer.self_attn.forward(g, &self.params, x, x, Some(&mask), 0.0)?;
            let a = g.dropout(a.context, p)?;
            let r = g.tape.add(x, a)?;
            x = layer.ln_attn.forward(g, &self.params, r)?;
            let f = layer.ffn.forward(g, &self.params, x, p)?;
            let f = g.dropout(f, p)?;
            let r = g.tape.add(x, f)?;
            x = layer.ln_ffn.forward(g, &self.params, r)?;
        }
        Ok(EncoderStates {
            h: x,
            pad_mask: src.pad_mask.clone(),
            batch: src.batch,
            len: src.len,
        })
    }

    /// Teacher-forced decoder over `trg_in` (each row begins with bos).
    ///
    /// `cross_keep[b] == false` removes the encoder-decoder attention for
    /// row `b` in every layer; `enc == None` removes it for all rows.
    pub fn decode(&self, g: &mut Graph, trg_in: &IdBatch, enc: Option<&EncoderStates>, cross_keep: Option<&[bool]>) -> Result<DecoderStates> {
        self.check_ids(trg_in)?;
        if let Some(e) = enc {
            if e.batch != trg_in.batch {
                return Err(Error::Shape {
                    op: "decode",
                    lhs: vec![trg_in.batch],
                    rhs: vec![e.batch],
                });
            }
        }
        let p = self.config.dropout;
        let causal = AttnMask::causal(trg_in.len);
        let gate = match (enc, cross_keep) {
            (None, _) => None,
            (Some(_), None) => Some(None),
            (Some(_), Some(keep)) if keep.iter().all(|&k| !k) => None,
            (Some(_), Some(keep)) if keep.iter().all(|&k| k) => Some(None),
            (Some(_), Some(keep)) => {
                let data = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                Some(Some(g.tape.constant(&[trg_in.batch, 1, 1], data)?))
            }
        };
        let cross_mask = enc.map(|e| AttnMask::padding(&e.pad_mask, e.batch, e.len));
        let mut x = self.embed(g, self.layout.embed_trg, trg_in)?;
        let mut cross_weights = None;
        for layer in &self.layout.decoder {
            let a = layer.self_attn.forward(g, &self.params, x, x, Some(&causal), 0.0)?;
            let a = g.dropout(a.context, p)?;
            let r = g.tape.add(x, a)?;
            x = layer.ln_self.forward(g, &self.params, r)?;
            if let (Some(e), Some(gate)) = (enc, gate) {
                let c = layer.cross_attn.forward(g, &self.params, x, e.h, cross_mask.as_ref(), 0.0)?;
                cross_weights = Some(c.weights);
                let mut ctx = g.dropout(c.context, p)?;
                if let Some(gv) = gate {
                    ctx = g.tape.mul(ctx, gv)?;
                }
                let r = g.tape.add(x, ctx)?;
                x = layer.ln_cross.forward(g, &self.params, r)?;
            }
            let f = layer.ffn.forward(g, &self.params, x, p)?;
            let f = g.dropout(f, p)?;
            let r = g.tape.add(x, f)?;
            x = layer.ln_ffn.forward(g, &self.params, r)?;
        }
        let w = g.param(&self.params, self.layout.embed_out);
        let wt = g.tape.transpose(w)?;
        let logits = g.tape.matmul(x, wt)?;
        let p_gen = g.tape.softmax(logits, 2)?;
        Ok(DecoderStates { h: x, p_gen, cross_weights })
    }

    /// Full forward pass: encoder, decoder, copy attention and balancing factor.
    pub fn forward(&self, g: &mut Graph, src: Option<&IdBatch>, trg_in: &IdBatch, cross_keep: Option<&[bool]>) -> Result<ForwardOutput> {
        let enc = src.map(|s| self.encode(g, s)).transpose()?;
        let dec = self.decode(g, trg_in, enc.as_ref(), cross_keep)?;
        let (copy, alpha) = match (&self.layout.copy, &enc) {
            (Some(c), Some(e)) => {
                let s = c.copy_scores(g, &self.params, dec.h, e)?;
                let a = c.balance_factor(g, &self.params, &s, e, self.config.balance_weighting)?;
                (Some(s), Some(a))
            }
            _ => (None, None),
        };
        Ok(ForwardOutput { enc, dec, copy, alpha })
    }

    /// Right/wrong logits for every source position, `[batch, len, 2]`.
    pub fn label_logits(&self, g: &mut Graph, enc: &EncoderStates) -> Result<Var> {
        self.layout.label.forward(g, &self.params, enc.h)
    }

    /// Decoder state and distributions at the last position of each prefix,
    /// evaluated without dropout.
    pub fn decode_step(&self, src: &IdBatch, prefixes: &IdBatch) -> Result<Vec<StepOutput>> {
        if prefixes.len == 0 {
            return Err(Error::Contract("decode_step needs a non-empty prefix".into()));
        }
        let mut g = Graph::eval();
        let out = self.forward(&mut g, Some(src), prefixes, None)?;
        Ok(self.collect_last_steps(&g, &out, prefixes))
    }

    pub(crate) fn collect_last_steps(&self, g: &Graph, out: &ForwardOutput, prefixes: &IdBatch) -> Vec<StepOutput> {
        let (d, v, t) = (self.config.d_model, self.config.vocab_size, prefixes.len);
        let h = g.tape.value(out.dec.h);
        let p_gen = g.tape.value(out.dec.p_gen);
        (0..prefixes.batch)
            .map(|b| {
                let last = prefixes.pad_mask[b * t..(b + 1) * t].iter().rposition(|&p| !p).unwrap_or(0);
                let row = b * t + last;
                let (p_copy, alpha) = match (&out.copy, out.alpha, &out.enc) {
                    (Some(c), Some(a), Some(e)) => {
                        let pc = g.tape.value(c.p_copy);
                        (pc[row * e.len..(row + 1) * e.len].to_vec(), g.tape.value(a)[row])
                    }
                    _ => (Vec::new(), 0.0),
                };
                let cross = match (&out.dec.cross_weights, &out.enc) {
                    (Some(w), Some(e)) => {
                        let heads = self.config.n_heads;
                        let wv = g.tape.value(*w);
                        let mut avg = vec![0.0; e.len];
                        for hd in 0..heads {
                            let base = ((b * heads + hd) * t + last) * e.len;
                            for (j, a) in avg.iter_mut().enumerate() {
                                *a += wv[base + j] / heads as f64;
                            }
                        }
                        avg
                    }
                    _ => Vec::new(),
                };
                StepOutput {
                    h: h[row * d..(row + 1) * d].to_vec(),
                    p_gen: p_gen[row * v..(row + 1) * v].to_vec(),
                    p_copy,
                    alpha,
                    cross_attention: cross,
                }
            })
            .collect()
    }

    /// Copies every parameter whose name satisfies `keep` from `other`.
    /// Shapes must agree.
    pub fn load_params_from(&mut self, other: &ParamStore, keep: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            if !keep(&name) {
                continue;
            }
            let src = other
                .id(&name)
                .map(|i| other.get(i))
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from source")))?;
            let dst = self.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!("parameter {name}: shape {:?} vs {:?}", src.shape(), dst.shape())));
            }
            dst.data_mut().copy_from_slice(src.data());
            n += 1;
        }
        Ok(n)
    }

    /// Sets every scalar parameter to `value` (gains and weights alike).
    pub fn fill_params(&mut self, value: f64) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = value);
        }
    }

    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self.params.id(name).ok_or_else(|| Error::Config(format!("no parameter {name}")))?;
        let dst = self.params.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: dst.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        dst.data_mut().copy_from_slice(t.data());
        Ok(())
    }
}

/// Per-row snapshot of one decoding step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub h: Vec<f64>,
    pub p_gen: Vec<f64>,
    pub p_copy: Vec<f64>,
    pub alpha: f64,
    /// Encoder-decoder attention of the last layer, averaged over heads.
    pub cross_attention: Vec<f64>,
}

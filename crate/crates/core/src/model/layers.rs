use rand::Rng;

use super::params::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub(crate) fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, limit, shape)
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, limit: f64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.insert(format!("{name}.weight"), xavier(rng, d_in, d_out, &[d_in, d_out]));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.tape.layer_norm(x, gain, bias)
    }
}

/// Boolean attention mask (`true` = blocked) broadcastable to
/// `[batch, heads, queries, keys]`.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub blocked: Vec<bool>,
    pub shape: [usize; 4],
}

impl AttnMask {
    /// Key-padding mask of shape `[batch, 1, 1, keys]`.
    pub fn padding(pad: &[bool], batch: usize, keys: usize) -> Self {
        Self {
            blocked: pad.to_vec(),
            shape: [batch, 1, 1, keys],
        }
    }

    /// Lower-triangular mask of shape `[1, 1, len, len]`.
    pub fn causal(len: usize) -> Self {
        let blocked = (0..len * len).map(|i| i % len > i / len).collect();
        Self {
            blocked,
            shape: [1, 1, len, len],
        }
    }

    fn check_rows(&self) -> Result<()> {
        let keys = self.shape[3];
        if keys == 0 {
            return Err(Error::Contract("attention over zero keys".into()));
        }
        if self.blocked.chunks(keys).any(|row| row.iter().all(|&b| b)) {
            return Err(Error::Contract("fully-masked attention row: at least one key must be attendable".into()));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

/// Result of one attention call.
pub struct AttnOutput {
    /// `[batch, queries, d_model]`
    pub context: Var,
    /// `[batch, heads, queries, keys]`, each row a simplex point over unmasked keys.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
            n_heads,
            d_model,
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let dh = self.d_model / self.n_heads;
        let r = g.tape.reshape(x, &[b, t, self.n_heads, dh])?;
        g.tape.permute(r, &[0, 2, 1, 3])
    }

    /// `query` is `[batch, queries, d]`, `source` is `[batch, keys, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, source: Var, mask: Option<&AttnMask>, dropout: f64) -> Result<AttnOutput> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config("d_model must be divisible by n_heads".into()));
        }
        let qs = g.tape.shape(query).to_vec();
        if qs.len() != 3 || qs[2] != self.d_model {
            return Err(Error::Shape {
                op: "attention",
                lhs: qs,
                rhs: vec![self.d_model],
            });
        }
        if let Some(m) = mask {
            m.check_rows()?;
        }
        let (b, tq) = (qs[0], qs[1]);
        let dh = self.d_model / self.n_heads;
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, source)?;
        let v = self.v.forward(g, store, source)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.tape.transpose(k)?;
        let scores = g.tape.matmul(q, kt)?;
        let mut scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = g.tape.masked_fill(scores, &m.blocked, &m.shape)?;
        }
        let weights = g.tape.softmax(scores, 3)?;
        let dropped = g.dropout(weights, dropout)?;
        let ctx = g.tape.matmul(dropped, v)?;
        let ctx = g.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.tape.reshape(ctx, &[b, tq, self.d_model])?;
        let context = self.o.forward(g, store, ctx)?;
        Ok(AttnOutput { context, weights })
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, d_ffn: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.in"), d_model, d_ffn, true, rng),
            outer: Linear::new(store, &format!("{name}.out"), d_ffn, d_model, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.tape.relu(h);
        let h = g.dropout(h, dropout)?;
        self.outer.forward(g, store, h)
    }
}

/// Sinusoidal position table `[max_positions, d]`.
pub fn sinusoidal_table(max_positions: usize, d: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_positions * d];
    for pos in 0..max_positions {
        for i in 0..d / 2 {
            let freq = (10000f64).powf(-((2 * i) as f64) / d as f64);
            table[pos * d + 2 * i] = (pos as f64 * freq).sin();
            table[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    table
}

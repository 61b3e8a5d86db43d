//! A small pre-norm transformer encoder. The classification vector `u` is
//! the final hidden state at the `[CLS]` position.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSequence, PAD};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamStore};
use crate::rng;
use crate::tensor::{Activation, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Dropout rate, applied only in training mode.
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 64,
            dropout: 0.1,
            activation: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "encoder.d_model {} is not divisible by encoder.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "encoder.dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters of a model with this config.
    pub fn param_count(&self) -> usize {
        let (v, d, f, t) = (self.vocab_size, self.d_model, self.d_ff, self.max_len);
        let layer = 2 * d + (4 * d * d + 3 * d) + 2 * d + (d * f + f) + (f * d + d);
        v * d + t * d + self.n_layers * layer + 2 * d
    }
}

// The key projection has no bias: it would add the same amount to every
// score of a query row, which softmax cancels, so its gradient is always 0.
const LAYER_PARAMS: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gain", "ln2.bias", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: ParamStore,
}

/// Output of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Token states, `[batch * seq, d_model]`.
    pub states: Var,
    /// Classification vectors, `[batch, d_model]`.
    pub cls: Var,
    /// Padded length used for this batch (the longest real length).
    pub seq: usize,
    /// Attention nodes, one per layer.
    pub attention: Vec<Var>,
}

impl EncoderModel {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "encoder.init");
        let (d, f) = (config.d_model, config.d_ff);
        let mut p = ParamStore::new();
        p.insert(
            "encoder.tok_emb",
            normal_tensor(&mut r, &[config.vocab_size, d], INIT_STD),
        )?;
        p.insert(
            "encoder.pos_emb",
            normal_tensor(&mut r, &[config.max_len, d], INIT_STD),
        )?;
        for l in 0..config.n_layers {
            for name in LAYER_PARAMS {
                let shape: Vec<usize> = match name {
                    "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => vec![d, d],
                    "ff.w1" => vec![d, f],
                    "ff.w2" => vec![f, d],
                    "ff.b1" => vec![f],
                    _ => vec![d],
                };
                let t = if name.ends_with(".gain") {
                    Tensor::full(&shape, 1.0)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    normal_tensor(&mut r, &shape, INIT_STD)
                };
                p.insert(format!("encoder.layers.{l}.{name}"), t)?;
            }
        }
        p.insert("encoder.ln_f.gain", Tensor::full(&[d], 1.0))?;
        p.insert("encoder.ln_f.bias", Tensor::zeros(&[d]))?;
        Ok(EncoderModel { config, params: p })
    }

    /// Rebuilds a model from stored tensors (names prefixed `encoder.`).
    pub fn from_params(config: EncoderConfig, params: &ParamStore) -> Result<Self> {
        let reference = EncoderModel::init(config.clone(), 0)?;
        let mut p = ParamStore::new();
        for (name, t) in reference.params.iter() {
            let stored = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing encoder parameter {name}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::shape(
                    "encoder",
                    format!(
                        "{name}: stored {:?}, config needs {:?}",
                        stored.shape(),
                        t.shape()
                    ),
                ));
            }
            let mut c = stored.clone();
            c.set_requires_grad(false);
            p.insert(name, c)?;
        }
        Ok(EncoderModel { config, params: p })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tok_emb(&self, bound: &Bound) -> Var {
        bound.get(0)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn check_batch(&self, batch: &[EncodedSequence]) -> Result<usize> {
        if batch.is_empty() {
            return Err(Error::invalid("encoder: empty batch"));
        }
        let mut seq = 0;
        for s in batch {
            if s.len() > self.config.max_len {
                return Err(Error::invalid(format!(
                    "encoder: sequence of {} tokens exceeds max_len {}",
                    s.len(),
                    self.config.max_len
                )));
            }
            if let Some(&bad) = s.ids().iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::invalid(format!(
                    "encoder: token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            seq = seq.max(s.len());
        }
        Ok(seq)
    }

    /// Runs the stack over a padded batch. Each sequence is cut to the
    /// longest real length in the batch, which cannot change any real
    /// position since padded keys are masked. Passing `dropout_rng` enables
    /// dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[EncodedSequence],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let seq = self.check_batch(batch)?;
        let cfg = &self.config;
        let lens: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let ids: Vec<usize> = batch
            .iter()
            .flat_map(|s| (0..seq).map(move |i| s.ids().get(i).copied().unwrap_or(PAD)))
            .collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();

        let tok = g.embedding_lookup(bound.get(0), &ids)?;
        let pos = g.embedding_lookup(bound.get(1), &positions)?;
        let mut h = g.add(tok, pos)?;
        h = dropout(g, h, cfg.dropout, dropout_rng.as_deref_mut())?;

        let mut attention = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |j: usize| bound.get(2 + l * PER_LAYER + j);
            let a = g.layer_norm(h, p(0), p(1), LN_EPS)?;
            let q = linear(g, a, p(2), p(3))?;
            let k = g.matmul(a, p(4))?;
            let v = linear(g, a, p(5), p(6))?;
            let att = g.attention(q, k, v, cfg.n_heads, seq, &lens)?;
            attention.push(att);
            let o = linear(g, att, p(7), p(8))?;
            let o = dropout(g, o, cfg.dropout, dropout_rng.as_deref_mut())?;
            h = g.add(h, o)?;

            let b = g.layer_norm(h, p(9), p(10), LN_EPS)?;
            let f = linear(g, b, p(11), p(12))?;
            let f = g.activate(f, cfg.activation)?;
            let f = linear(g, f, p(13), p(14))?;
            let f = dropout(g, f, cfg.dropout, dropout_rng.as_deref_mut())?;
            h = g.add(h, f)?;
        }
        let last = 2 + cfg.n_layers * PER_LAYER;
        let states = g.layer_norm(h, bound.get(last), bound.get(last + 1), LN_EPS)?;
        let cls_rows: Vec<usize> = (0..batch.len()).map(|b| b * seq).collect();
        let cls = g.gather_rows(states, &cls_rows)?;
        Ok(EncoderOutput {
            states,
            cls,
            seq,
            attention,
        })
    }

    /// Classification vector and all token states of one sequence, without
    /// dropout.
    pub fn encode_sequence(&self, seq: &EncodedSequence) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.forward(&mut g, &b, std::slice::from_ref(seq), None)?;
        Ok((g.data(out.cls).to_vec(), g.tensor(out.states)))
    }

    /// Classification vectors for many sequences, in order.
    pub fn embed(&self, seqs: &[EncodedSequence], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let b = self.bind(&mut g, false);
            let o = self.forward(&mut g, &b, chunk, None)?;
            out.extend(g.data(o.cls).chunks(d).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let n = g.data(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let m = g.constant(g.shape(x).to_vec(), mask)?;
    g.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = EncoderConfig {
            vocab_size: 100,
            n_heads: 5,
            ..Default::default()
        };
        assert!(matches!(EncoderModel::init(cfg, 0), Err(Error::Config(_))));
    }
}

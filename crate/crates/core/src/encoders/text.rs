use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Vocabulary id of the pooling token appended to every sequence.
pub const EOT_TOKEN: usize = 0;
/// Pseudo-tokens standing for the phrase "a photo of".
pub const PREFIX_TOKENS: [usize; 3] = [1, 2, 3];
/// First vocabulary id available for primitive names.
pub const FIRST_FREE_TOKEN: usize = 4;
/// Longest caller-supplied token sequence.
pub const MAX_TOKENS: usize = 16;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_tok: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_ratio: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: 256,
            d_tok: 32,
            d: 64,
            heads: 4,
            blocks: 2,
            ffn_ratio: 4,
            seed: 0,
        }
    }
}

struct Block<T> {
    ln1_gain: Tensor<T>,
    ln1_bias: Tensor<T>,
    wq: Tensor<T>,
    wk: Tensor<T>,
    wv: Tensor<T>,
    wo: Tensor<T>,
    ln2_gain: Tensor<T>,
    ln2_bias: Tensor<T>,
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

/// Frozen stand-in for a CLIP-style text transformer.
///
/// Pre-norm blocks with bidirectional self-attention over learned absolute
/// positions; the output is read at an appended end-of-text token and
/// projected to the joint embedding width `d`.
pub struct FrozenTextEncoder<T> {
    cfg: TextEncoderConfig,
    vocab: Tensor<T>,
    positions: Tensor<T>,
    blocks: Vec<Block<T>>,
    lnf_gain: Tensor<T>,
    lnf_bias: Tensor<T>,
    proj: Tensor<T>,
}

impl<T: Element> FrozenTextEncoder<T> {
    pub fn new(cfg: TextEncoderConfig) -> Result<Self> {
        if cfg.heads == 0 || !cfg.d_tok.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "text encoder: {} heads do not divide d_tok {}",
                cfg.heads, cfg.d_tok
            )));
        }
        if cfg.vocab_size <= FIRST_FREE_TOKEN {
            return Err(Error::Config("text encoder vocabulary too small".into()));
        }
        let s = cfg.seed;
        let dt = cfg.d_tok;
        let hidden = dt * cfg.ffn_ratio;
        let std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let key = |name: &str| format!("text.block{b}.{name}");
                Block {
                    ln1_gain: Tensor::full(&[dt], T::one()),
                    ln1_bias: Tensor::zeros(&[dt]),
                    wq: rng::gaussian_tensor(s, &key("wq"), &[dt, dt], std(dt)),
                    wk: rng::gaussian_tensor(s, &key("wk"), &[dt, dt], std(dt)),
                    wv: rng::gaussian_tensor(s, &key("wv"), &[dt, dt], std(dt)),
                    wo: rng::gaussian_tensor(s, &key("wo"), &[dt, dt], std(dt)),
                    ln2_gain: Tensor::full(&[dt], T::one()),
                    ln2_bias: Tensor::zeros(&[dt]),
                    w1: rng::gaussian_tensor(s, &key("w1"), &[dt, hidden], std(dt)),
                    b1: rng::gaussian_tensor(s, &key("b1"), &[hidden], 0.02),
                    w2: rng::gaussian_tensor(s, &key("w2"), &[hidden, dt], std(hidden)),
                    b2: rng::gaussian_tensor(s, &key("b2"), &[dt], 0.02),
                }
            })
            .collect();
        Ok(FrozenTextEncoder {
            cfg,
            vocab: rng::gaussian_tensor(s, "text.vocab", &[cfg.vocab_size, dt], 1.0),
            positions: rng::gaussian_tensor(s, "text.positions", &[MAX_TOKENS + 1, dt], 0.5),
            blocks,
            lnf_gain: Tensor::full(&[dt], T::one()),
            lnf_bias: Tensor::zeros(&[dt]),
            proj: rng::gaussian_tensor(s, "text.proj", &[dt, cfg.d], std(dt)),
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    pub fn d_tok(&self) -> usize {
        self.cfg.d_tok
    }

    /// Embedding rows for the given vocabulary ids, `[ids.len() × d_tok]`.
    pub fn token_embeddings(&self, ids: &[usize]) -> Result<Tensor<T>> {
        self.vocab.select_rows(ids)
    }

    pub fn bind<'g>(&self, g: &'g Graph<T>) -> BoundTextEncoder<'g, '_, T> {
        BoundTextEncoder {
            enc: self,
            graph: g,
            eot: g.constant(self.vocab.select_rows(&[EOT_TOKEN]).expect("eot row")),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    ln1_gain: g.constant(b.ln1_gain.clone()),
                    ln1_bias: g.constant(b.ln1_bias.clone()),
                    wq: g.constant(b.wq.clone()),
                    wk: g.constant(b.wk.clone()),
                    wv: g.constant(b.wv.clone()),
                    wo: g.constant(b.wo.clone()),
                    ln2_gain: g.constant(b.ln2_gain.clone()),
                    ln2_bias: g.constant(b.ln2_bias.clone()),
                    w1: g.constant(b.w1.clone()),
                    b1: g.constant(b.b1.clone()),
                    w2: g.constant(b.w2.clone()),
                    b2: g.constant(b.b2.clone()),
                })
                .collect(),
            lnf_gain: g.constant(self.lnf_gain.clone()),
            lnf_bias: g.constant(self.lnf_bias.clone()),
            proj: g.constant(self.proj.clone()),
        }
    }

    /// Encode one token sequence `[L × d_tok]` without recording gradients.
    pub fn encode_text(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let len = tokens.shape().first().copied().unwrap_or(0);
        let x = g.constant(tokens.clone());
        let out = self.bind(&g).encode(x, len)?;
        let d = self.cfg.d;
        (*out.value()).clone().reshape(&[d])
    }

    /// FNV-1a digest over every frozen weight.
    pub fn fingerprint(&self) -> u64 {
        let mut parts = vec![&self.vocab, &self.positions, &self.lnf_gain, &self.lnf_bias, &self.proj];
        for b in &self.blocks {
            parts.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w1, &b.b1,
                &b.w2, &b.b2,
            ]);
        }
        fingerprint(parts)
    }
}

pub(crate) fn fingerprint<'a, T: Element>(parts: impl IntoIterator<Item = &'a Tensor<T>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = Vec::new();
    for t in parts {
        buf.clear();
        for &x in t.data() {
            x.write_le(&mut buf);
        }
        for &b in &buf {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

struct BoundBlock<'g, T> {
    ln1_gain: Var<'g, T>,
    ln1_bias: Var<'g, T>,
    wq: Var<'g, T>,
    wk: Var<'g, T>,
    wv: Var<'g, T>,
    wo: Var<'g, T>,
    ln2_gain: Var<'g, T>,
    ln2_bias: Var<'g, T>,
    w1: Var<'g, T>,
    b1: Var<'g, T>,
    w2: Var<'g, T>,
    b2: Var<'g, T>,
}

/// Encoder weights placed on a graph as constants, reusable across calls.
pub struct BoundTextEncoder<'g, 'e, T> {
    enc: &'e FrozenTextEncoder<T>,
    graph: &'g Graph<T>,
    eot: Var<'g, T>,
    blocks: Vec<BoundBlock<'g, T>>,
    lnf_gain: Var<'g, T>,
    lnf_bias: Var<'g, T>,
    proj: Var<'g, T>,
}

impl<'g, T: Element> BoundTextEncoder<'g, '_, T> {
    /// Encode `N` stacked sequences of `seq_len` tokens each.
    ///
    /// `tokens` is `[N·seq_len × d_tok]`; the result is `[N × d]`. Gradients
    /// flow back into `tokens` but never into the frozen weights.
    pub fn encode(&self, tokens: Var<'g, T>, seq_len: usize) -> Result<Var<'g, T>> {
        let shape = tokens.shape();
        let dt = self.enc.cfg.d_tok;
        if seq_len == 0 {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if seq_len > MAX_TOKENS {
            return Err(Error::Contract(format!(
                "sequence of {seq_len} tokens exceeds the limit of {MAX_TOKENS}"
            )));
        }
        if shape.len() != 2 || shape[1] != dt || !shape[0].is_multiple_of(seq_len) {
            return Err(shape_err!(
                "token matrix {shape:?} is not a stack of [{seq_len} x {dt}] sequences"
            ));
        }
        let n = shape[0] / seq_len;
        let len = seq_len + 1;

        // Interleave the pooling token after each sequence.
        let pool = Var::concat_rows(&[tokens, self.eot])?;
        let order: Vec<usize> = (0..n)
            .flat_map(|s| (0..seq_len).map(move |t| s * seq_len + t).chain(std::iter::once(n * seq_len)))
            .collect();
        let pos_rows: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let pos = self.graph.constant(self.enc.positions.select_rows(&pos_rows)?);
        let mut x = pool.gather_rows(&order)?.add(pos)?;

        let eps = T::lit(LN_EPS);
        for b in &self.blocks {
            let h = x.layer_norm(b.ln1_gain, b.ln1_bias, eps)?;
            let q = h.matmul(b.wq)?;
            let k = h.matmul(b.wk)?;
            let v = h.matmul(b.wv)?;
            let att = q.attention_scores(k, self.enc.cfg.heads, n)?.attention_mix(v)?;
            x = x.add(att.matmul(b.wo)?)?;
            let h = x.layer_norm(b.ln2_gain, b.ln2_bias, eps)?;
            let ff = h.linear(b.w1, Some(b.b1))?.gelu()?.linear(b.w2, Some(b.b2))?;
            x = x.add(ff)?;
        }
        let last: Vec<usize> = (0..n).map(|s| s * len + seq_len).collect();
        x.gather_rows(&last)?
            .layer_norm(self.lnf_gain, self.lnf_bias, eps)?
            .matmul(self.proj)
    }
}

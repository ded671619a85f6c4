use super::params::{BoundParams, ParamStore};
use crate::config::DecouplerKind;
use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Residual branches start small so a fresh decoupler is close to identity.
const RESIDUAL_INIT: f64 = 0.1;

fn key(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

/// Register the weights of one decoupler under `prefix`.
pub fn init_decoupler<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    kind: DecouplerKind,
    d: usize,
    seed: u64,
) {
    let std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    let mut put = |name: &str, t: Tensor<T>| store.insert(key(prefix, name), t);
    let g = |name: &str, shape: &[usize], s: f64| rng::gaussian_tensor::<T>(seed, &key(prefix, name), shape, s);
    match kind {
        DecouplerKind::Ca => {
            for w in ["wq", "wk", "wv", "wo"] {
                put(w, g(w, &[d, d], std(d)));
            }
            put("ln.gain", Tensor::full(&[d], T::one()));
            put("ln.bias", Tensor::zeros(&[d]));
            put("ffn.w1", g("ffn.w1", &[d, 4 * d], std(d)));
            put("ffn.b1", Tensor::zeros(&[4 * d]));
            put("ffn.w2", g("ffn.w2", &[4 * d, d], RESIDUAL_INIT * std(4 * d)));
            put("ffn.b2", Tensor::zeros(&[d]));
        }
        DecouplerKind::Mlp => {
            put("w1", g("w1", &[d, d], std(d)));
            put("b1", Tensor::zeros(&[d]));
            put("w2", g("w2", &[d, d], RESIDUAL_INIT * std(d)));
            put("b2", Tensor::zeros(&[d]));
        }
    }
}

/// Cross-attention from `f` (queries) over `keys`.
///
/// Returns the decoupled feature `f + FFN(LN(f + O))` and the head-averaged
/// attention weights `[B × n]`.
pub fn cross_modal_decouple<'g, T: Element>(
    p: &BoundParams<'g, '_, T>,
    prefix: &str,
    f: Var<'g, T>,
    keys: Var<'g, T>,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let d = f.shape().last().copied().unwrap_or(0);
    if keys.shape().len() != 2 || keys.shape()[1] != d {
        return Err(shape_err!("decoupler keys {:?} vs features {:?}", keys.shape(), f.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide d = {d}")));
    }
    let w = |n: &str| p.var(&key(prefix, n));
    let q = f.matmul(w("wq"))?;
    let k = keys.matmul(w("wk"))?;
    let v = keys.matmul(w("wv"))?;
    let scores = q.attention_scores(k, heads, 1)?;
    let o = scores.attention_mix(v)?.matmul(w("wo"))?;
    let h = f.add(o)?.layer_norm(w("ln.gain"), w("ln.bias"), T::lit(LN_EPS))?;
    let ffn = h
        .linear(w("ffn.w1"), Some(w("ffn.b1")))?
        .gelu()?
        .linear(w("ffn.w2"), Some(w("ffn.b2")))?;
    Ok((f.add(ffn)?, scores.head_mean()?))
}

/// Residual MLP `x + W2·gelu(W1·x + b1) + b2`.
pub fn mlp_decouple<'g, T: Element>(p: &BoundParams<'g, '_, T>, prefix: &str, f: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = |n: &str| p.var(&key(prefix, n));
    let h = f.linear(w("w1"), Some(w("b1")))?.gelu()?.linear(w("w2"), Some(w("b2")))?;
    f.add(h)
}

/// Apply a decoupler of either kind. Attention weights are returned only for
/// cross-attention modules.
pub fn decouple<'g, T: Element>(
    p: &BoundParams<'g, '_, T>,
    prefix: &str,
    kind: DecouplerKind,
    f: Var<'g, T>,
    keys: Var<'g, T>,
    heads: usize,
) -> Result<(Var<'g, T>, Option<Var<'g, T>>)> {
    match kind {
        DecouplerKind::Ca => {
            let (out, s) = cross_modal_decouple(p, prefix, f, keys, heads)?;
            Ok((out, Some(s)))
        }
        DecouplerKind::Mlp => Ok((mlp_decouple(p, prefix, f)?, None)),
    }
}

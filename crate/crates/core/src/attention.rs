//! Multi-head attention and the pre-norm transformer blocks built on it.
//!
//! Sequences are batched as `B×L×N`. A self block is
//! `x + MHA(LN(x))` followed by `y + FFN(LN(y))` with a ReLU feed-forward of
//! width `ffn_mult·N`. A cross block normalizes the query and key/value
//! streams separately and carries the residual on the query side.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore, ParamVars};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Inverted dropout with its own seeded stream.
#[derive(Debug)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let scale = T::from_f64(1.0 / keep);
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(x.shape(), |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::ZERO
            }
        });
        let mask = tape.constant(mask);
        tape.mul(x, &mask)
    }
}

fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    dropout: &mut Option<Dropout>,
    x: Var<T>,
) -> Result<Var<T>> {
    match dropout {
        Some(d) => d.apply(tape, &x),
        None => Ok(x),
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionVars<T> {
    pub wq: Var<T>,
    pub bq: Var<T>,
    pub wk: Var<T>,
    pub bk: Var<T>,
    pub wv: Var<T>,
    pub bv: Var<T>,
    pub wo: Var<T>,
    pub bo: Var<T>,
}

impl<T: Scalar> AttentionVars<T> {
    pub fn from_params(p: &ParamVars<T>, prefix: &str) -> Result<Self> {
        let g = |s: &str| p.get(&format!("{prefix}.{s}")).cloned();
        Ok(Self {
            wq: g("wq")?,
            bq: g("bq")?,
            wk: g("wk")?,
            bk: g("bk")?,
            wv: g("wv")?,
            bv: g("bv")?,
            wo: g("wo")?,
            bo: g("bo")?,
        })
    }
}

/// Weights of one transformer block; `norm_kv` is present for cross blocks.
#[derive(Clone, Debug)]
pub struct BlockVars<T> {
    pub norm1: (Var<T>, Var<T>),
    pub norm_kv: Option<(Var<T>, Var<T>)>,
    pub attn: AttentionVars<T>,
    pub norm2: (Var<T>, Var<T>),
    pub w1: Var<T>,
    pub b1: Var<T>,
    pub w2: Var<T>,
    pub b2: Var<T>,
}

impl<T: Scalar> BlockVars<T> {
    pub fn from_params(p: &ParamVars<T>, prefix: &str, cross: bool) -> Result<Self> {
        let g = |s: &str| p.get(&format!("{prefix}.{s}")).cloned();
        Ok(Self {
            norm1: (g("norm1.gamma")?, g("norm1.beta")?),
            norm_kv: if cross {
                Some((g("norm_kv.gamma")?, g("norm_kv.beta")?))
            } else {
                None
            },
            attn: AttentionVars::from_params(p, &format!("{prefix}.attn"))?,
            norm2: (g("norm2.gamma")?, g("norm2.beta")?),
            w1: g("ffn.w1")?,
            b1: g("ffn.b1")?,
            w2: g("ffn.w2")?,
            b2: g("ffn.b2")?,
        })
    }
}

/// Add freshly initialized block weights under `prefix`.
pub fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Initializer,
    prefix: &str,
    n: usize,
    ffn_mult: usize,
    cross: bool,
) {
    let norm = |store: &mut ParamStore<T>, name: &str| {
        store.insert(format!("{prefix}.{name}.gamma"), Tensor::ones(&[n]));
        store.insert(format!("{prefix}.{name}.beta"), Tensor::zeros(&[n]));
    };
    norm(store, "norm1");
    if cross {
        norm(store, "norm_kv");
    }
    norm(store, "norm2");
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.attn.{w}"), init.linear(n, n));
        store.insert(format!("{prefix}.attn.b{}", &w[1..]), Tensor::zeros(&[n]));
    }
    let hidden = ffn_mult * n;
    store.insert(format!("{prefix}.ffn.w1"), init.linear(n, hidden));
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[hidden]));
    store.insert(format!("{prefix}.ffn.w2"), init.linear(hidden, n));
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[n]));
}

/// Scalar parameter count of one block.
pub fn block_param_count(n: usize, ffn_mult: usize, cross: bool) -> usize {
    let norms = if cross { 3 } else { 2 } * 2 * n;
    let attn = 4 * (n * n + n);
    let hidden = ffn_mult * n;
    let ffn = n * hidden + hidden + hidden * n + n;
    norms + attn + ffn
}

fn as_batched<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>) -> Result<(Var<T>, bool)> {
    match x.shape().len() {
        2 => {
            let s = x.shape().to_vec();
            Ok((tape.reshape(x, &[1, s[0], s[1]])?, true))
        }
        3 => Ok((x.clone(), false)),
        _ => Err(Error::shape(
            "mha",
            format!("expected L×N or B×L×N, got {:?}", x.shape()),
        )),
    }
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, heads: usize) -> Result<Var<T>> {
    let (b, l, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = n / heads;
    if heads == 1 {
        return Ok(x.clone());
    }
    let x = tape.reshape(x, &[b, l, heads, d])?;
    let x = tape.permute(&x, &[0, 2, 1, 3])?;
    tape.reshape(&x, &[b * heads, l, d])
}

fn merge_heads<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    batch: usize,
    heads: usize,
) -> Result<Var<T>> {
    if heads == 1 {
        return Ok(x.clone());
    }
    let (l, d) = (x.shape()[1], x.shape()[2]);
    let x = tape.reshape(x, &[batch, heads, l, d])?;
    let x = tape.permute(&x, &[0, 2, 1, 3])?;
    tape.reshape(&x, &[batch, l, heads * d])
}

/// Scaled dot-product multi-head attention. Returns the output and the
/// attention weights (`B·H × Lq × Lk`).
pub fn mha_with_weights<T: Scalar>(
    tape: &mut Tape<T>,
    w: &AttentionVars<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    n_head: usize,
) -> Result<(Var<T>, Var<T>)> {
    let n = *q.shape().last().unwrap_or(&0);
    if n_head == 0 || n == 0 || !n.is_multiple_of(n_head) {
        return Err(Error::shape(
            "mha",
            format!("{n_head} heads do not divide model dimension {n}"),
        ));
    }
    if k.shape() != v.shape() || k.shape().last() != Some(&n) || q.shape().len() != k.shape().len()
    {
        return Err(Error::shape(
            "mha",
            format!(
                "query {:?}, key {:?}, value {:?} are incompatible",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    let (q3, squeeze) = as_batched(tape, q)?;
    let (k3, _) = as_batched(tape, k)?;
    let (v3, _) = as_batched(tape, v)?;
    if q3.shape()[0] != k3.shape()[0] {
        return Err(Error::shape(
            "mha",
            format!("batch mismatch {:?} vs {:?}", q.shape(), k.shape()),
        ));
    }
    let batch = q3.shape()[0];
    let qp = tape.linear(&q3, &w.wq, Some(&w.bq))?;
    let kp = tape.linear(&k3, &w.wk, Some(&w.bk))?;
    let vp = tape.linear(&v3, &w.wv, Some(&w.bv))?;
    let qh = split_heads(tape, &qp, n_head)?;
    let kh = split_heads(tape, &kp, n_head)?;
    let vh = split_heads(tape, &vp, n_head)?;
    let scores = tape.bmm(&qh, &kh, true)?;
    let scores = tape.scale(&scores, 1.0 / ((n / n_head) as f64).sqrt())?;
    let weights = tape.softmax(&scores)?;
    let ctx = tape.bmm(&weights, &vh, false)?;
    let ctx = merge_heads(tape, &ctx, batch, n_head)?;
    let mut out = tape.linear(&ctx, &w.wo, Some(&w.bo))?;
    if squeeze {
        let l = out.shape()[1];
        out = tape.reshape(&out, &[l, n])?;
    }
    Ok((out, weights))
}

pub fn mha<T: Scalar>(
    tape: &mut Tape<T>,
    w: &AttentionVars<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    n_head: usize,
) -> Result<Var<T>> {
    Ok(mha_with_weights(tape, w, q, k, v, n_head)?.0)
}

fn feed_forward<T: Scalar>(
    tape: &mut Tape<T>,
    w: &BlockVars<T>,
    x: &Var<T>,
    eps: f64,
    dropout: &mut Option<Dropout>,
) -> Result<Var<T>> {
    let h = tape.layernorm(x, &w.norm2.0, &w.norm2.1, eps)?;
    let h = tape.linear(&h, &w.w1, Some(&w.b1))?;
    let h = tape.relu(&h)?;
    let h = maybe_dropout(tape, dropout, h)?;
    let h = tape.linear(&h, &w.w2, Some(&w.b2))?;
    let h = maybe_dropout(tape, dropout, h)?;
    tape.add(x, &h)
}

/// Pre-norm self-attention block over each sequence of `x[B×L×N]`.
pub fn self_block<T: Scalar>(
    tape: &mut Tape<T>,
    w: &BlockVars<T>,
    x: &Var<T>,
    n_head: usize,
    eps: f64,
    dropout: &mut Option<Dropout>,
) -> Result<Var<T>> {
    let h = tape.layernorm(x, &w.norm1.0, &w.norm1.1, eps)?;
    let a = mha(tape, &w.attn, &h, &h, &h, n_head)?;
    let a = maybe_dropout(tape, dropout, a)?;
    let y = tape.add(x, &a)?;
    feed_forward(tape, w, &y, eps, dropout)
}

/// Pre-norm cross-attention block: `q_seq` attends into `kv_seq`; the
/// residual stream is the query.
pub fn cross_block<T: Scalar>(
    tape: &mut Tape<T>,
    w: &BlockVars<T>,
    q_seq: &Var<T>,
    kv_seq: &Var<T>,
    n_head: usize,
    eps: f64,
    dropout: &mut Option<Dropout>,
) -> Result<Var<T>> {
    if q_seq.shape() != kv_seq.shape() {
        return Err(Error::Alignment(format!(
            "cross-attention streams differ: query {:?}, key/value {:?}",
            q_seq.shape(),
            kv_seq.shape()
        )));
    }
    let (gk, bk) = w
        .norm_kv
        .as_ref()
        .ok_or_else(|| Error::Contract("cross block without key/value norm".into()))?;
    let q = tape.layernorm(q_seq, &w.norm1.0, &w.norm1.1, eps)?;
    let kv = tape.layernorm(kv_seq, gk, bk, eps)?;
    let a = mha(tape, &w.attn, &q, &kv, &kv, n_head)?;
    let a = maybe_dropout(tape, dropout, a)?;
    let y = tape.add(q_seq, &a)?;
    feed_forward(tape, w, &y, eps, dropout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(n: usize, cross: bool, seed: u64) -> (ParamStore<f64>, String) {
        let mut store = ParamStore::new();
        init_block(&mut store, &mut Initializer::new(seed), "b", n, 4, cross);
        (store, "b".to_string())
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        Initializer::new(seed).uniform(shape, 1.0)
    }

    #[test]
    fn param_count_matches_store() {
        for cross in [false, true] {
            let (store, _) = block(8, cross, 1);
            assert_eq!(store.numel(), block_param_count(8, 4, cross));
        }
    }

    #[test]
    fn single_position_returns_value_under_identity_projections() {
        let n = 4;
        let mut tape = Tape::<f64>::inference();
        let eye = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        let z = Tensor::zeros(&[n]);
        let c = |t: &Tensor<f64>| tape.constant(t.clone());
        let w = AttentionVars {
            wq: c(&eye),
            bq: c(&z),
            wk: c(&eye),
            bk: c(&z),
            wv: c(&eye),
            bv: c(&z),
            wo: c(&eye),
            bo: c(&z),
        };
        let q = tape.constant(rand_tensor(&[1, n], 1));
        let k = tape.constant(rand_tensor(&[1, n], 2));
        let v = tape.constant(rand_tensor(&[1, n], 3));
        let out = mha(&mut tape, &w, &q, &k, &v, 2).unwrap();
        assert!(out.value().max_abs_diff(v.value()) < 1e-15);
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let (store, p) = block(8, false, 3);
        let mut tape = Tape::<f64>::inference();
        let vars = store.bind(&mut tape);
        let w = AttentionVars::from_params(&vars, &format!("{p}.attn")).unwrap();
        let x = tape.constant(rand_tensor(&[2, 5, 8], 4));
        let (_, a) = mha_with_weights(&mut tape, &w, &x, &x, &x, 2).unwrap();
        for row in a.value().data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let (mut store, p) = block(8, false, 5);
        for name in ["attn.wo", "attn.bo", "ffn.w2", "ffn.b2"] {
            let t = store.get_mut(&format!("{p}.{name}")).unwrap();
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::<f64>::inference();
        let vars = store.bind(&mut tape);
        let w = BlockVars::from_params(&vars, &p, false).unwrap();
        for l in [1, 7, 160] {
            let x = tape.constant(rand_tensor(&[1, l, 8], l as u64));
            let y = self_block(&mut tape, &w, &x, 2, 1e-5, &mut None).unwrap();
            assert_eq!(y.value(), x.value());
        }
    }

    #[test]
    fn cross_block_rejects_length_mismatch() {
        let (store, p) = block(8, true, 6);
        let mut tape = Tape::<f64>::inference();
        let vars = store.bind(&mut tape);
        let w = BlockVars::from_params(&vars, &p, true).unwrap();
        let q = tape.constant(rand_tensor(&[1, 4, 8], 1));
        let kv = tape.constant(rand_tensor(&[1, 5, 8], 2));
        let err = cross_block(&mut tape, &w, &q, &kv, 1, 1e-5, &mut None).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn head_count_must_divide_dim() {
        let (store, p) = block(8, false, 7);
        let mut tape = Tape::<f64>::inference();
        let vars = store.bind(&mut tape);
        let w = AttentionVars::from_params(&vars, &format!("{p}.attn")).unwrap();
        let x = tape.constant(rand_tensor(&[3, 8], 1));
        assert!(mha(&mut tape, &w, &x, &x, &x, 3).is_err());
    }

    #[test]
    fn dropout_zero_is_identity_and_positive_masks() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::ones(&[1000]));
        let y = Dropout::new(0.0, 1).apply(&mut tape, &x).unwrap();
        assert_eq!(y.value(), x.value());
        let y = Dropout::new(0.5, 1).apply(&mut tape, &x).unwrap();
        let zeros = y.value().data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 400 && zeros < 600);
        assert!(y.value().data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}

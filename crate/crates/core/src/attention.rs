//! Time-weighted multihead attention.
//!
//! Each head computes `softmax(QKᵀ/√d_k − w·log T)V` where `log T` holds
//! the log time gap between query and key and `w ≥ 0` is a per-head decay.

use rand::Rng;

use crate::embeddings::INIT_STD;
use crate::error::{Error, Result};
use crate::numeric::kernels::{gemm, put_cols, take_cols};
use crate::numeric::ops::{softmax_row_backward, softmax_row_masked};
use crate::numeric::params::truncated_normal;
use crate::numeric::{Grads, ParamId, ParamStore, Tensor};

/// Attention weights of one head, `lq × lk` row-major.
fn head_weights(
    q: &[f64],
    k: &[f64],
    lq: usize,
    lk: usize,
    dk: usize,
    decay: Option<(&[f64], f64)>,
    mask: &[bool],
) -> Vec<f64> {
    let mut s = vec![0.0; lq * lk];
    gemm(lq, dk, lk, q, false, k, true, &mut s, false);
    let scale = 1.0 / (dk as f64).sqrt();
    match decay {
        Some((log_gap, w)) => {
            for (v, g) in s.iter_mut().zip(log_gap) {
                *v = *v * scale - w * g;
            }
        }
        None => s.iter_mut().for_each(|v| *v *= scale),
    }
    for (row, m) in s.chunks_mut(lk).zip(mask.chunks(lk)) {
        softmax_row_masked(row, m);
    }
    s
}

fn check_attention_shapes(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Result<(usize, usize, usize, usize)> {
    let bad = |what: &str| Err(Error::Shape(format!("attention: {what}")));
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return bad("Q, K and V must be matrices");
    }
    let (lq, dk) = (q.shape()[0], q.shape()[1]);
    let lk = k.shape()[0];
    if k.shape()[1] != dk {
        return bad("Q and K widths differ");
    }
    if v.shape()[0] != lk {
        return bad("K and V lengths differ");
    }
    if mask.len() != lq * lk {
        return bad("mask is not L_q × L_k");
    }
    Ok((lq, lk, dk, v.shape()[1]))
}

/// Plain masked scaled dot-product attention.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (lq, lk, dk, dv) = check_attention_shapes(q, k, v, mask)?;
    let p = head_weights(q.data(), k.data(), lq, lk, dk, None, mask);
    let mut out = vec![0.0; lq * dv];
    gemm(lq, lk, dv, &p, false, v.data(), false, &mut out, false);
    Tensor::from_vec(&[lq, dv], out)
}

/// Attention with logits `QKᵀ/√d_k − w·log T`.
pub fn scaled_dot_attention_decayed(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    log_gap: &Tensor,
    mask: &[bool],
    w: f64,
) -> Result<Tensor> {
    let (lq, lk, dk, dv) = check_attention_shapes(q, k, v, mask)?;
    if log_gap.shape() != [lq, lk] {
        return Err(Error::Shape(format!(
            "attention: log gap {:?}, expected [{lq}, {lk}]",
            log_gap.shape()
        )));
    }
    let p = head_weights(q.data(), k.data(), lq, lk, dk, Some((log_gap.data(), w)), mask);
    let mut out = vec![0.0; lq * dv];
    gemm(lq, lk, dv, &p, false, v.data(), false, &mut out, false);
    Tensor::from_vec(&[lq, dv], out)
}

/// Projection weights and per-head decays of one attention block.
#[derive(Clone, Debug)]
pub struct MultiheadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub decay: ParamId,
    pub heads: usize,
    pub d_model: usize,
    pub time_weighted: bool,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    lq: usize,
    lk: usize,
    x_q: Vec<f64>,
    x_kv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per-head weights, each `lq × lk`.
    probs: Vec<Vec<f64>>,
    merged: Vec<f64>,
}

impl MultiheadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        time_weighted: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let mut proj = |suffix: &str, rng: &mut R| {
            store.add(
                format!("{name}.{suffix}"),
                truncated_normal(rng, &[d_model, d_model], INIT_STD),
            )
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let wo = proj("wo", rng);
        let init: Vec<f64> = if time_weighted {
            (0..heads).map(|_| rng.random_range(f64::EPSILON..1.0)).collect()
        } else {
            vec![0.0; heads]
        };
        let decay = store.add(format!("{name}.decay"), Tensor::from_vec(&[heads], init)?);
        Ok(MultiheadAttention {
            wq,
            wk,
            wv,
            wo,
            decay,
            heads,
            d_model,
            time_weighted,
        })
    }

    fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// `x_q: [lq, d]`, `x_kv: [lk, d]`, `mask` and `log_gap`: `[lq, lk]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        x_q: &[f64],
        x_kv: &[f64],
        mask: &[bool],
        log_gap: &[f64],
    ) -> (Vec<f64>, AttentionCache) {
        let d = self.d_model;
        let dh = self.d_head();
        let lq = x_q.len() / d;
        let lk = x_kv.len() / d;
        let project = |x: &[f64], rows: usize, w: ParamId| {
            let mut y = vec![0.0; rows * d];
            gemm(rows, d, d, x, false, store.value(w), false, &mut y, false);
            y
        };
        let q = project(x_q, lq, self.wq);
        let k = project(x_kv, lk, self.wk);
        let v = project(x_kv, lk, self.wv);
        let decay = store.value(self.decay);
        let mut merged = vec![0.0; lq * d];
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = take_cols(&q, lq, d, h * dh, dh);
            let kh = take_cols(&k, lk, d, h * dh, dh);
            let vh = take_cols(&v, lk, d, h * dh, dh);
            let dec = self.time_weighted.then_some((log_gap, decay[h]));
            let p = head_weights(&qh, &kh, lq, lk, dh, dec, mask);
            let mut oh = vec![0.0; lq * dh];
            gemm(lq, lk, dh, &p, false, &vh, false, &mut oh, false);
            put_cols(&mut merged, lq, d, h * dh, &oh);
            probs.push(p);
        }
        let mut out = vec![0.0; lq * d];
        gemm(lq, d, d, &merged, false, store.value(self.wo), false, &mut out, false);
        let cache = AttentionCache {
            lq,
            lk,
            x_q: x_q.to_vec(),
            x_kv: x_kv.to_vec(),
            q,
            k,
            v,
            probs,
            merged,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients and returns `(d x_q, d x_kv)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &AttentionCache,
        dout: &[f64],
        log_gap: &[f64],
        grads: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.d_model;
        let dh = self.d_head();
        let (lq, lk) = (cache.lq, cache.lk);
        let scale = 1.0 / (dh as f64).sqrt();

        gemm(d, lq, d, &cache.merged, true, dout, false, grads.get_mut(self.wo), true);
        let mut dmerged = vec![0.0; lq * d];
        gemm(lq, d, d, dout, false, store.value(self.wo), true, &mut dmerged, false);

        let mut dq = vec![0.0; lq * d];
        let mut dk = vec![0.0; lk * d];
        let mut dv = vec![0.0; lk * d];
        let mut ddecay = vec![0.0; self.heads];
        let mut ds = vec![0.0; lq * lk];
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let doh = take_cols(&dmerged, lq, d, h * dh, dh);
            let qh = take_cols(&cache.q, lq, d, h * dh, dh);
            let kh = take_cols(&cache.k, lk, d, h * dh, dh);
            let vh = take_cols(&cache.v, lk, d, h * dh, dh);

            let mut dvh = vec![0.0; lk * dh];
            gemm(lk, lq, dh, p, true, &doh, false, &mut dvh, false);
            let mut dp = vec![0.0; lq * lk];
            gemm(lq, dh, lk, &doh, false, &vh, true, &mut dp, false);
            for ((dsr, pr), dpr) in ds.chunks_mut(lk).zip(p.chunks(lk)).zip(dp.chunks(lk)) {
                softmax_row_backward(pr, dpr, dsr);
            }
            if self.time_weighted {
                ddecay[h] = -ds.iter().zip(log_gap).map(|(a, b)| a * b).sum::<f64>();
            }
            ds.iter_mut().for_each(|v| *v *= scale);
            let mut dqh = vec![0.0; lq * dh];
            gemm(lq, lk, dh, &ds, false, &kh, false, &mut dqh, false);
            let mut dkh = vec![0.0; lk * dh];
            gemm(lk, lq, dh, &ds, true, &qh, false, &mut dkh, false);
            put_cols(&mut dq, lq, d, h * dh, &dqh);
            put_cols(&mut dk, lk, d, h * dh, &dkh);
            put_cols(&mut dv, lk, d, h * dh, &dvh);
        }
        for (g, dd) in grads.get_mut(self.decay).iter_mut().zip(&ddecay) {
            *g += dd;
        }

        gemm(d, lq, d, &cache.x_q, true, &dq, false, grads.get_mut(self.wq), true);
        gemm(d, lk, d, &cache.x_kv, true, &dk, false, grads.get_mut(self.wk), true);
        gemm(d, lk, d, &cache.x_kv, true, &dv, false, grads.get_mut(self.wv), true);
        let mut dx_q = vec![0.0; lq * d];
        gemm(lq, d, d, &dq, false, store.value(self.wq), true, &mut dx_q, false);
        let mut dx_kv = vec![0.0; lk * d];
        gemm(lk, d, d, &dk, false, store.value(self.wk), true, &mut dx_kv, false);
        gemm(lk, d, d, &dv, false, store.value(self.wv), true, &mut dx_kv, true);
        (dx_q, dx_kv)
    }

    /// Projects the decays back onto `w ≥ 0`; holds them at zero when the
    /// block is not time weighted.
    pub fn clamp_decay(&self, store: &mut ParamStore) {
        let tw = self.time_weighted;
        for w in store.get_mut(self.decay).value.data_mut() {
            *w = if tw { w.max(0.0) } else { 0.0 };
        }
    }
}

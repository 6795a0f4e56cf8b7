//! Fused multi-head window attention with a relative-position bias table and
//! an optional region mask.

use std::sync::Arc;

use super::{record, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Static description of how tokens inside each window relate.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub heads: usize,
    /// Tokens per window.
    pub window_len: usize,
    /// `window_len * window_len` rows into the bias table, one per (query, key).
    pub rel_index: Arc<Vec<u32>>,
    /// Region label of every token of every window of one batch item; tokens
    /// with different labels never attend to each other. `None` disables masking.
    pub regions: Option<Arc<Vec<u32>>>,
    pub windows_per_item: usize,
}

impl AttentionLayout {
    fn masked(&self, window: usize, i: usize, j: usize) -> bool {
        match &self.regions {
            None => false,
            Some(r) => {
                let base = (window % self.windows_per_item) * self.window_len;
                r[base + i] != r[base + j]
            }
        }
    }
}

/// Softmax attention weights (L x L, row = query) of one window and head.
/// `qkv` is the (L, 3C) slice of that window.
fn probs_into<T: Scalar>(
    qkv: &[T],
    table: &[T],
    layout: &AttentionLayout,
    window: usize,
    head: usize,
    channels: usize,
    out: &mut [T],
) {
    let l = layout.window_len;
    let hd = channels / layout.heads;
    let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
    for i in 0..l {
        let q = &qkv[i * 3 * channels + head * hd..][..hd];
        let row = &mut out[i * l..(i + 1) * l];
        let mut max = T::neg_infinity();
        for (j, r) in row.iter_mut().enumerate() {
            if layout.masked(window, i, j) {
                *r = T::neg_infinity();
                continue;
            }
            let k = &qkv[j * 3 * channels + channels + head * hd..][..hd];
            let dot: T = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
            let bias = table[layout.rel_index[i * l + j] as usize * layout.heads + head];
            *r = dot * scale + bias;
            if *r > max {
                max = *r;
            }
        }
        let mut total = T::zero();
        for r in row.iter_mut() {
            *r = if *r == T::neg_infinity() {
                T::zero()
            } else {
                (*r - max).exp()
            };
            total += *r;
        }
        for r in row.iter_mut() {
            *r = *r / total;
        }
    }
}

fn check_shapes<T: Scalar>(
    qkv: &Tensor<T>,
    table: &Tensor<T>,
    layout: &AttentionLayout,
) -> Result<usize> {
    let s = qkv.shape();
    if s.len() != 3 || s[1] != layout.window_len || s[2] % 3 != 0 {
        return Err(Error::Shape(format!(
            "window attention expects (B, {}, 3C), got {s:?}",
            layout.window_len
        )));
    }
    let channels = s[2] / 3;
    if layout.heads == 0 || channels % layout.heads != 0 {
        return Err(Error::Shape(format!(
            "{channels} channels not divisible by {} heads",
            layout.heads
        )));
    }
    if table.shape().len() != 2 || table.shape()[1] != layout.heads {
        return Err(Error::Shape(format!("bias table {:?}", table.shape())));
    }
    if layout.rel_index.len() != layout.window_len * layout.window_len
        || layout
            .rel_index
            .iter()
            .any(|&r| r as usize >= table.shape()[0])
    {
        return Err(Error::Shape("relative index out of table range".into()));
    }
    if s[0] % layout.windows_per_item.max(1) != 0 {
        return Err(Error::Shape(format!(
            "{} windows is not a multiple of {} windows per item",
            s[0], layout.windows_per_item
        )));
    }
    Ok(channels)
}

/// Attention weights of window `window`, head `head` (row-major L x L).
pub fn attention_probs<T: Scalar>(
    qkv: &Tensor<T>,
    table: &Tensor<T>,
    layout: &AttentionLayout,
    window: usize,
    head: usize,
) -> Result<Vec<T>> {
    let channels = check_shapes(qkv, table, layout)?;
    let l = layout.window_len;
    let mut out = vec![T::zero(); l * l];
    let qkv_w = &qkv.data()[window * l * 3 * channels..(window + 1) * l * 3 * channels];
    probs_into(
        qkv_w,
        table.data(),
        layout,
        window,
        head,
        channels,
        &mut out,
    );
    Ok(out)
}

/// Multi-head attention inside each window: `qkv` (B, L, 3C) packs queries,
/// keys and values as `[3][heads][head_dim]` along the last axis; the result
/// is (B, L, C) with heads concatenated.
pub fn window_attention<'t, T: Scalar>(
    qkv: &Var<'t, T>,
    table: &Var<'t, T>,
    layout: &AttentionLayout,
) -> Result<Var<'t, T>> {
    let channels = check_shapes(qkv.value(), table.value(), layout)?;
    let (b, l, heads) = (qkv.shape()[0], layout.window_len, layout.heads);
    let hd = channels / heads;
    let mut out = vec![T::zero(); b * l * channels];
    let mut probs = vec![T::zero(); l * l];
    let data = qkv.value().data();
    for w in 0..b {
        let qkv_w = &data[w * l * 3 * channels..(w + 1) * l * 3 * channels];
        let out_w = &mut out[w * l * channels..(w + 1) * l * channels];
        for h in 0..heads {
            probs_into(
                qkv_w,
                table.value().data(),
                layout,
                w,
                h,
                channels,
                &mut probs,
            );
            for i in 0..l {
                let o = &mut out_w[i * channels + h * hd..][..hd];
                for j in 0..l {
                    let p = probs[i * l + j];
                    if p == T::zero() {
                        continue;
                    }
                    let v = &qkv_w[j * 3 * channels + 2 * channels + h * hd..][..hd];
                    for (a, &bv) in o.iter_mut().zip(v) {
                        *a += p * bv;
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![b, l, channels], out)?;
    let qkv_v = qkv.arc();
    let table_v = table.arc();
    let layout = layout.clone();
    Ok(record(&[qkv, table], out, move |grad, needs| {
        let data = qkv_v.data();
        let table = table_v.data();
        let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut dqkv = vec![T::zero(); data.len()];
        let mut dtable = vec![T::zero(); table.len()];
        let mut probs = vec![T::zero(); l * l];
        let mut dlogits = vec![T::zero(); l * l];
        for w in 0..b {
            let qkv_w = &data[w * l * 3 * channels..(w + 1) * l * 3 * channels];
            let d_w = &mut dqkv[w * l * 3 * channels..(w + 1) * l * 3 * channels];
            let g_w = &grad.data()[w * l * channels..(w + 1) * l * channels];
            for h in 0..heads {
                probs_into(qkv_w, table, &layout, w, h, channels, &mut probs);
                for i in 0..l {
                    let go = &g_w[i * channels + h * hd..][..hd];
                    let mut row_dot = T::zero();
                    for j in 0..l {
                        let p = probs[i * l + j];
                        let v_off = j * 3 * channels + 2 * channels + h * hd;
                        let dp: T = go
                            .iter()
                            .zip(&qkv_w[v_off..v_off + hd])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        dlogits[i * l + j] = dp;
                        row_dot += p * dp;
                        if p != T::zero() {
                            for (dv, &gv) in d_w[v_off..v_off + hd].iter_mut().zip(go) {
                                *dv += p * gv;
                            }
                        }
                    }
                    for j in 0..l {
                        let p = probs[i * l + j];
                        dlogits[i * l + j] = p * (dlogits[i * l + j] - row_dot);
                    }
                }
                for i in 0..l {
                    for j in 0..l {
                        let ds = dlogits[i * l + j];
                        if ds == T::zero() {
                            continue;
                        }
                        dtable[layout.rel_index[i * l + j] as usize * heads + h] += ds;
                        let q_off = i * 3 * channels + h * hd;
                        let k_off = j * 3 * channels + channels + h * hd;
                        let s = ds * scale;
                        for t in 0..hd {
                            let (qv, kv) = (qkv_w[q_off + t], qkv_w[k_off + t]);
                            d_w[q_off + t] += s * kv;
                            d_w[k_off + t] += s * qv;
                        }
                    }
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(qkv_v.shape().to_vec(), dqkv).unwrap()),
            needs[1].then(|| Tensor::new(table_v.shape().to_vec(), dtable).unwrap()),
        ]
    }))
}

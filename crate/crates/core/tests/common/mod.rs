//! Independent 64-bit reference implementations used as test oracles.
//! The references never call into the crate's numerics; `gradcheck` compares
//! the two.

#![allow(dead_code)]

pub mod gradcheck;

use std::collections::HashMap;

use echat_core::nn::{ParamStore, Tensor};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> Self {
        assert_eq!(d.len(), r * c);
        Self { r, c, d }
    }

    pub fn zeros(r: usize, c: usize) -> Self {
        Self::new(r, c, vec![0.0; r * c])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (r, c) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("unsupported shape {s:?}"),
        };
        Self::new(r, c, t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }
}

pub fn matmul(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.r);
    let mut out = M::zeros(a.r, b.c);
    for i in 0..a.r {
        for j in 0..b.c {
            out.d[i * b.c + j] = (0..a.c).map(|k| a.at(i, k) * b.at(k, j)).sum();
        }
    }
    out
}

pub fn add(a: &M, b: &M) -> M {
    assert_eq!((a.r, a.c), (b.r, b.c));
    M::new(a.r, a.c, a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect())
}

pub fn add_row(a: &M, row: &M) -> M {
    assert_eq!(row.d.len(), a.c);
    M::new(
        a.r,
        a.c,
        a.d.iter()
            .enumerate()
            .map(|(i, x)| x + row.d[i % a.c])
            .collect(),
    )
}

pub fn map(a: &M, f: impl Fn(f64) -> f64) -> M {
    M::new(a.r, a.c, a.d.iter().map(|&x| f(x)).collect())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = xs.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return vec![0.0; xs.len()];
    }
    let m = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_rows(a: &M) -> M {
    let mut out = Vec::with_capacity(a.d.len());
    for i in 0..a.r {
        out.extend(softmax(a.row(i)));
    }
    M::new(a.r, a.c, out)
}

pub fn softmax_cols(a: &M) -> M {
    let mut out = M::zeros(a.r, a.c);
    for j in 0..a.c {
        let col: Vec<f64> = (0..a.r).map(|i| a.at(i, j)).collect();
        for (i, v) in softmax(&col).into_iter().enumerate() {
            out.d[i * a.c + j] = v;
        }
    }
    out
}

pub fn layer_norm(x: &M, gain: &M, bias: &M, eps: f64) -> M {
    let mut out = M::zeros(x.r, x.c);
    for i in 0..x.r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        for j in 0..x.c {
            out.d[i * x.c + j] = (row[j] - mean) / (var + eps).sqrt() * gain.d[j] + bias.d[j];
        }
    }
    out
}

/// Scaled dot-product attention over `heads` column groups; `mask[i*tk+j]`
/// allows query `i` to see key `j`.
pub fn attention(q: &M, k: &M, v: &M, heads: usize, mask: Option<&[bool]>) -> M {
    let dh = q.c / heads;
    let mut out = M::zeros(q.r, q.c);
    for h in 0..heads {
        for i in 0..q.r {
            let scores: Vec<f64> = (0..k.r)
                .map(|j| {
                    if mask.is_some_and(|m| !m[i * k.r + j]) {
                        return f64::NEG_INFINITY;
                    }
                    (0..dh)
                        .map(|x| q.at(i, h * dh + x) * k.at(j, h * dh + x))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let p = softmax(&scores);
            for x in 0..dh {
                out.d[i * q.c + h * dh + x] = (0..k.r).map(|j| p[j] * v.at(j, h * dh + x)).sum();
            }
        }
    }
    out
}

pub fn causal(t: usize) -> Vec<bool> {
    (0..t * t).map(|e| e % t <= e / t).collect()
}

pub fn unfold(x: &M, kernel: usize, stride: usize) -> M {
    let pad = kernel / 2;
    let tout = x.r.div_ceil(stride);
    let mut out = M::zeros(tout, kernel * x.c);
    for o in 0..tout {
        for j in 0..kernel {
            let src = (o * stride + j) as isize - pad as isize;
            if src >= 0 && (src as usize) < x.r {
                for c in 0..x.c {
                    out.d[o * kernel * x.c + j * x.c + c] = x.at(src as usize, c);
                }
            }
        }
    }
    out
}

pub fn mean_rows(x: &M) -> M {
    let mut out = M::zeros(1, x.c);
    for j in 0..x.c {
        out.d[j] = (0..x.r).map(|i| x.at(i, j)).sum::<f64>() / x.r as f64;
    }
    out
}

pub fn weighted_sum(layers: &[M], w: &[f64]) -> M {
    let mut out = M::zeros(layers[0].r, layers[0].c);
    for (l, &wi) in layers.iter().zip(w) {
        for (o, v) in out.d.iter_mut().zip(&l.d) {
            *o += wi * v;
        }
    }
    out
}

pub fn concat_rows(parts: &[M]) -> M {
    let c = parts[0].c;
    let d: Vec<f64> = parts.iter().flat_map(|p| p.d.clone()).collect();
    M::new(d.len() / c, c, d)
}

pub fn gather_rows(table: &M, ids: &[usize]) -> M {
    M::new(
        ids.len(),
        table.c,
        ids.iter().flat_map(|&i| table.row(i).to_vec()).collect(),
    )
}

/// Mean NLL over rows whose target differs from `ignore`.
pub fn cross_entropy(logits: &M, targets: &[usize], ignore: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

pub fn sinusoid(t: usize, dim: usize) -> M {
    let mut out = M::zeros(t, dim);
    for p in 0..t {
        for i in 0..dim {
            let a = p as f64 / 10000f64.powf(2.0 * (i / 2) as f64 / dim as f64);
            out.d[p * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Named parameters in 64-bit.
pub type Params = HashMap<String, M>;

pub fn params_from_store(store: &ParamStore) -> Params {
    store
        .iter()
        .map(|(_, name, p)| (name.to_string(), M::from_tensor(&p.value)))
        .collect()
}

pub fn linear(p: &Params, name: &str, x: &M) -> M {
    add_row(
        &matmul(x, &p[&format!("{name}.weight")]),
        &p[&format!("{name}.bias")],
    )
}

pub fn ln(p: &Params, name: &str, x: &M) -> M {
    layer_norm(
        x,
        &p[&format!("{name}.gain")],
        &p[&format!("{name}.bias")],
        1e-5,
    )
}

pub fn block(p: &Params, name: &str, x: &M, heads: usize, causal_mask: bool) -> M {
    let h = ln(p, &format!("{name}.norm1"), x);
    let q = linear(p, &format!("{name}.attn.query"), &h);
    let k = linear(p, &format!("{name}.attn.key"), &h);
    let v = linear(p, &format!("{name}.attn.value"), &h);
    let mask = causal_mask.then(|| causal(x.r));
    let a = attention(&q, &k, &v, heads, mask.as_deref());
    let x = add(x, &linear(p, &format!("{name}.attn.output"), &a));
    let h = ln(p, &format!("{name}.norm2"), &x);
    let h = map(&linear(p, &format!("{name}.ff_in"), &h), gelu);
    add(&x, &linear(p, &format!("{name}.ff_out"), &h))
}

pub struct RefModel {
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub conv_layers: usize,
    pub conv_stride: usize,
    pub conn_layers: usize,
    pub conn_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
}

pub struct RefOutput {
    pub logits: M,
    pub emotion_logits: Option<M>,
    pub prefix_len: usize,
}

impl RefModel {
    /// Full forward pass. `emotion` selects the stage-2 layout.
    pub fn forward(
        &self,
        p: &Params,
        speech: &M,
        prompt: &[usize],
        targets: &[usize],
        emotion: bool,
    ) -> RefOutput {
        let mut h = speech.clone();
        for i in 0..self.conv_layers {
            h = map(
                &linear(
                    p,
                    &format!("encoder.conv.{i}"),
                    &unfold(&h, 3, self.conv_stride),
                ),
                gelu,
            );
        }
        h = ln(p, "encoder.front_norm", &h);
        h = add(&h, &sinusoid(h.r, h.c));
        let mut layers = Vec::new();
        for i in 0..self.enc_layers {
            h = block(p, &format!("encoder.layers.{i}"), &h, self.enc_heads, false);
            layers.push(h.clone());
        }
        let sw = softmax(&p["encoder.speech_weights"].d);
        let mut s = weighted_sum(&layers, &sw);
        for i in 0..self.conn_layers {
            s = block(
                p,
                &format!("connector.layers.{i}"),
                &s,
                self.conn_heads,
                false,
            );
        }
        let speech_dec = linear(p, "connector.speech_proj", &s);
        let tok = &p["decoder.tok_emb"];
        let mut parts = vec![gather_rows(tok, &[1])];
        let mut emotion_logits = None;
        if emotion {
            let ew = softmax(&p["encoder.emotion_weights"].d);
            let pooled = mean_rows(&weighted_sum(&layers, &ew));
            emotion_logits = Some(linear(p, "emotion_head", &pooled));
            parts.push(linear(p, "connector.emotion_proj", &pooled));
        }
        parts.push(speech_dec);
        if !prompt.is_empty() {
            parts.push(gather_rows(tok, prompt));
        }
        let prefix_len: usize = parts.iter().map(|m| m.r).sum();
        if !targets.is_empty() {
            parts.push(gather_rows(tok, targets));
        }
        let x = concat_rows(&parts);
        let pos = &p["decoder.pos_emb"];
        let mut h = add(&x, &M::new(x.r, x.c, pos.d[..x.r * x.c].to_vec()));
        for i in 0..self.dec_layers {
            h = block(p, &format!("decoder.layers.{i}"), &h, self.dec_heads, true);
        }
        let h = ln(p, "decoder.final_norm", &h);
        RefOutput {
            logits: linear(p, "decoder.lm_head", &h),
            emotion_logits,
            prefix_len,
        }
    }

    /// `(1 − α)·decoder CE + α·emotion CE` for one example.
    pub fn loss(
        &self,
        p: &Params,
        speech: &M,
        prompt: &[usize],
        targets: &[usize],
        label: Option<usize>,
        alpha: f64,
    ) -> f64 {
        let out = self.forward(p, speech, prompt, targets, label.is_some());
        let n = out.logits.r;
        let mut shifted = vec![usize::MAX; n];
        for (i, &t) in targets.iter().enumerate() {
            shifted[out.prefix_len + i - 1] = t;
        }
        let l_dec = cross_entropy(&out.logits, &shifted, usize::MAX);
        let l_emo = match (label, &out.emotion_logits) {
            (Some(y), Some(l)) => cross_entropy(l, &[y], usize::MAX),
            _ => 0.0,
        };
        (1.0 - alpha) * l_dec + alpha * l_emo
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Relative error used by every gradient check.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

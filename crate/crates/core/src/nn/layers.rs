//! Parameterised building blocks shared by the encoder, connector and decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("attention dims must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// `y = x·W + b` with `W` stored as `[in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight =
            store.insert_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.insert_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Zero both weight and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert_const(format!("{name}.gain"), &[dim], 1.0),
            bias: store.insert_const(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
        }
    }
}

/// Row-major `t×t` table allowing position `i` to see positions `0..=i`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|e| e % t <= e / t).collect()
}

/// Projected multi-head attention. When `cfg.causal` is set the causal mask
/// is combined with any explicit `mask`.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    mask: Option<&[bool]>,
) -> Result<Var> {
    for x in [q, k, v] {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != cfg.model_dim {
            return Err(Error::dim("multi_head_attention", s, &[cfg.model_dim]));
        }
    }
    let (tq, tk) = (g.shape(q)[0], g.shape(k)[0]);
    if let Some(m) = mask {
        if m.len() != tq * tk {
            return Err(Error::dim("attention mask", &[tq, tk], &[m.len()]));
        }
    }
    let combined;
    let mask = if cfg.causal {
        if tq != tk {
            return Err(Error::dim("causal attention", &[tq], &[tk]));
        }
        let mut c = causal_mask(tq);
        if let Some(m) = mask {
            c.iter_mut().zip(m).for_each(|(a, b)| *a &= *b);
        }
        combined = c;
        Some(combined.as_slice())
    } else {
        mask
    };
    let qp = params.query.forward(g, q)?;
    let kp = params.key.forward(g, k)?;
    let vp = params.value.forward(g, v)?;
    let ctx = g.attention(qp, kp, vp, cfg.num_heads, mask)?;
    params.output.forward(g, ctx)
}

/// Pre-norm transformer block: self-attention and a GELU feed-forward,
/// each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: AttentionParams::new(store, &format!("{name}.attn"), d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, cfg.ff_dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), cfg.ff_dim, d, rng),
        }
    }

    /// Zero the attention output and feed-forward output projections,
    /// turning the block into the identity map.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.attn.output.zero(store);
        self.ff_out.zero(store);
    }
}

pub fn transformer_block(
    g: &mut Graph,
    x: Var,
    params: &TransformerBlock,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let h = params.norm1.forward(g, x)?;
    let a = multi_head_attention(g, h, h, h, &params.attn, cfg, None)?;
    let x = g.add(x, a)?;
    let h = params.norm2.forward(g, x)?;
    let h = params.ff_in.forward(g, h)?;
    let h = g.gelu(h);
    let h = params.ff_out.forward(g, h)?;
    g.add(x, h)
}

/// Strided, same-padded 1-D convolutions, each followed by GELU.
#[derive(Debug, Clone)]
pub struct ConvSubsample {
    pub layers: Vec<Linear>,
    pub kernel: usize,
}

pub const CONV_KERNEL: usize = 3;

impl ConvSubsample {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|i| {
                let cin = if i == 0 { in_dim } else { out_dim };
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    CONV_KERNEL * cin,
                    out_dim,
                    rng,
                )
            })
            .collect();
        Self {
            layers,
            kernel: CONV_KERNEL,
        }
    }

    /// Frame count after every layer has been applied to `t` input frames.
    pub fn output_len(&self, t: usize, stride: usize) -> usize {
        self.layers.iter().fold(t, |t, _| t.div_ceil(stride))
    }
}

pub fn conv1d_subsample(
    g: &mut Graph,
    x: Var,
    params: &ConvSubsample,
    stride: usize,
) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 2 {
        return Err(Error::dim("conv1d_subsample", s, &[]));
    }
    if s[0] < params.kernel {
        return Err(Error::InputTooShort {
            len: s[0],
            min: params.kernel,
        });
    }
    let mut h = x;
    for layer in &params.layers {
        let cin = g.shape(h)[1];
        if cin * params.kernel != layer.in_dim {
            return Err(Error::dim("conv1d_subsample", g.shape(h), &[layer.in_dim]));
        }
        let cols = g.unfold(h, params.kernel, stride)?;
        let y = layer.forward(g, cols)?;
        h = g.gelu(y);
    }
    Ok(h)
}

/// Fixed sinusoidal position table, `[t × dim]` row-major.
pub fn sinusoidal_positions(t: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0; t * dim];
    for pos in 0..t {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Tensor;

    fn cfg(d: usize, causal: bool) -> AttentionConfig {
        AttentionConfig {
            model_dim: d,
            num_heads: 2,
            ff_dim: 2 * d,
            causal,
        }
    }

    fn random_input(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![t, d],
            (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zeroed_block_is_identity() {
        let c = cfg(16, false);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = TransformerBlock::new(&mut store, "b", &c, &mut rng);
        block.zero_output_projections(&mut store);
        for t in [1, 7] {
            let input = random_input(t, 16, t as u64);
            let mut g = Graph::new(&store);
            let x = g.constant(input.clone());
            let y = transformer_block(&mut g, x, &block, &c).unwrap();
            assert_eq!(g.shape(y), &[t, 16]);
            assert_eq!(g.value(y), input.data());
        }
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let c = cfg(4, false);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = AttentionParams::new(&mut store, "a", 4, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(random_input(1, 4, 9));
        let y = multi_head_attention(&mut g, x, x, x, &attn, &c, None).unwrap();
        let v = attn.value.forward(&mut g, x).unwrap();
        let expect = attn.output.forward(&mut g, v).unwrap();
        assert_eq!(g.value(y), g.value(expect));
    }

    #[test]
    fn causal_row_zero_ignores_later_positions() {
        let c = cfg(4, true);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = AttentionParams::new(&mut store, "a", 4, &mut rng);
        let base = random_input(3, 4, 1);
        let mut perturbed = base.clone();
        for v in &mut perturbed.data_mut()[4..] {
            *v += 0.75;
        }
        let row0 = |input: Tensor| {
            let mut g = Graph::new(&store);
            let x = g.constant(input);
            let y = multi_head_attention(&mut g, x, x, x, &attn, &c, None).unwrap();
            g.value(y)[..4].to_vec()
        };
        assert_eq!(row0(base), row0(perturbed));
    }

    #[test]
    fn bad_mask_shape_is_rejected() {
        let c = cfg(4, false);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = AttentionParams::new(&mut store, "a", 4, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(random_input(3, 4, 1));
        let err = multi_head_attention(&mut g, x, x, x, &attn, &c, Some(&[true; 4]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_lengths_use_ceiling_per_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = ConvSubsample::new(&mut store, "c", 4, 8, 2, &mut rng);
        for (t, want) in [(8, 2), (9, 3), (3, 1)] {
            let mut g = Graph::new(&store);
            let x = g.constant(random_input(t, 4, 0));
            let y = conv1d_subsample(&mut g, x, &conv, 2).unwrap();
            assert_eq!(g.shape(y), &[want, 8]);
            assert_eq!(conv.output_len(t, 2), want);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(random_input(2, 4, 0));
        assert!(matches!(
            conv1d_subsample(&mut g, x, &conv, 2),
            Err(Error::InputTooShort { len: 2, min: 3 })
        ));
    }

    #[test]
    fn attention_config_rejects_indivisible_heads() {
        let c = AttentionConfig {
            model_dim: 10,
            num_heads: 4,
            ff_dim: 8,
            causal: false,
        };
        assert!(c.validate().is_err());
    }
}

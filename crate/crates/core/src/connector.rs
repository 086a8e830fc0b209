//! Connection module: non-causal transformer blocks and a projection that
//! carry encoder-space speech into the decoder's embedding space, plus a
//! separate projection for the pooled emotion embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EmotionEmbedding;
use crate::error::{Error, Result};
use crate::nn::{
    transformer_block, AttentionConfig, Graph, Linear, ParamStore, TransformerBlock, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectorConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub decoder_dim: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            ff_dim: 128,
            decoder_dim: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Connector {
    pub cfg: ConnectorConfig,
    pub model_dim: usize,
    pub blocks: Vec<TransformerBlock>,
    pub speech_proj: Linear,
    pub emotion_proj: Linear,
}

impl Connector {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: ConnectorConfig,
        model_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.decoder_dim == 0 {
            return Err(Error::Config(
                "connector decoder_dim must be positive".into(),
            ));
        }
        let att = Self::attention_for(&cfg, model_dim);
        if cfg.num_layers > 0 {
            att.validate()?;
        }
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::new(store, &format!("connector.layers.{i}"), &att, rng))
            .collect();
        Ok(Self {
            speech_proj: Linear::new(
                store,
                "connector.speech_proj",
                model_dim,
                cfg.decoder_dim,
                rng,
            ),
            emotion_proj: Linear::new(
                store,
                "connector.emotion_proj",
                model_dim,
                cfg.decoder_dim,
                rng,
            ),
            cfg,
            model_dim,
            blocks,
        })
    }

    fn attention_for(cfg: &ConnectorConfig, model_dim: usize) -> AttentionConfig {
        AttentionConfig {
            model_dim,
            num_heads: cfg.num_heads,
            ff_dim: cfg.ff_dim,
            causal: false,
        }
    }

    /// `[T'×model_dim] → [T'×decoder_dim]`
    pub fn connect_speech(&self, g: &mut Graph, speech_seq: Var) -> Result<Var> {
        let s = g.shape(speech_seq);
        if s.len() != 2 || s[1] != self.model_dim {
            return Err(Error::dim("connect_speech", s, &[self.model_dim]));
        }
        let att = Self::attention_for(&self.cfg, self.model_dim);
        let mut h = speech_seq;
        for block in &self.blocks {
            h = transformer_block(g, h, block, &att)?;
        }
        self.speech_proj.forward(g, h)
    }

    /// `[1×model_dim] → [1×decoder_dim]`
    pub fn connect_emotion(&self, g: &mut Graph, emo: EmotionEmbedding) -> Result<Var> {
        let s = g.shape(emo.0);
        if s != [1, self.model_dim] {
            return Err(Error::dim("connect_emotion", s, &[1, self.model_dim]));
        }
        self.emotion_proj.forward(g, emo.0)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Tensor;

    fn setup() -> (ParamStore, Connector) {
        let mut store = ParamStore::new();
        let c = Connector::new(
            &mut store,
            ConnectorConfig {
                decoder_dim: 48,
                ..Default::default()
            },
            64,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        (store, c)
    }

    fn input(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![t, d],
            (0..t * d)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn speech_path_preserves_length() {
        let (store, c) = setup();
        for t in [1, 4, 9] {
            let mut g = Graph::new(&store);
            let x = g.constant(input(t, 64, t as u64));
            let y = c.connect_speech(&mut g, x).unwrap();
            assert_eq!(g.shape(y), &[t, 48]);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(input(2, 32, 0));
        assert!(c.connect_speech(&mut g, x).is_err());
    }

    #[test]
    fn zeroed_blocks_leave_only_the_projection() {
        let (mut store, c) = setup();
        for b in &c.blocks {
            b.zero_output_projections(&mut store);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(input(3, 64, 1));
        let y = c.connect_speech(&mut g, x).unwrap();
        let p = c.speech_proj.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), g.value(p));
    }

    #[test]
    fn emotion_projection_is_affine() {
        let (store, c) = setup();
        let bias = store.value(c.emotion_proj.bias).data().to_vec();
        let mut g = Graph::new(&store);
        let zero = g.constant(Tensor::zeros(&[1, 64]));
        let y0 = c.connect_emotion(&mut g, EmotionEmbedding(zero)).unwrap();
        assert_eq!(g.shape(y0), &[1, 48]);
        assert_eq!(g.value(y0), bias.as_slice());

        let e = input(1, 64, 7);
        let e2 = Tensor::new(vec![1, 64], e.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let (a, b) = (g.constant(e), g.constant(e2));
        let ya = c.connect_emotion(&mut g, EmotionEmbedding(a)).unwrap();
        let yb = c.connect_emotion(&mut g, EmotionEmbedding(b)).unwrap();
        for i in 0..48 {
            let lhs = g.value(yb)[i] - bias[i];
            let rhs = 2.0 * (g.value(ya)[i] - bias[i]);
            assert!((lhs - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn speech_and_emotion_paths_are_disjoint() {
        let (mut store, c) = setup();
        let x = input(3, 64, 2);
        let run = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let v = g.constant(x.clone());
            let y = c.connect_speech(&mut g, v).unwrap();
            g.value(y).to_vec()
        };
        let before = run(&store);
        store.get_mut(c.emotion_proj.weight).value.data_mut()[0] += 1.0;
        assert_eq!(before, run(&store));
    }
}

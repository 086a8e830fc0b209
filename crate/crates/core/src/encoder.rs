//! Convolutional front end plus a transformer stack whose every layer
//! output is exposed, aggregated by two independent softmax-weighted sums:
//! one for the speech sequence and one for the pooled emotion embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::nn::{
    conv1d_subsample, sinusoidal_positions, transformer_block, AttentionConfig, ConvSubsample,
    Graph, LayerNorm, ParamId, ParamStore, Tensor, TransformerBlock, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub conv_layers: usize,
    pub conv_stride: usize,
    pub input_feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            conv_layers: 2,
            conv_stride: 2,
            input_feature_dim: FEATURE_DIM,
        }
    }
}

impl EncoderConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            causal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.conv_layers == 0 || self.conv_stride == 0 {
            return Err(Error::Config(
                "encoder needs at least one layer, one conv layer and a positive stride".into(),
            ));
        }
        if self.input_feature_dim == 0 {
            return Err(Error::Config("input_feature_dim must be positive".into()));
        }
        self.attention().validate()
    }

    /// Frames left after the convolutional front end.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        (0..self.conv_layers).fold(frames, |t, _| t.div_ceil(self.conv_stride))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightPurpose {
    Speech,
    Emotion,
}

/// Per-layer logits, softmax-normalised into aggregation weights.
#[derive(Debug, Clone)]
pub struct LayerWeightSet {
    pub logits: ParamId,
    pub purpose: WeightPurpose,
}

impl LayerWeightSet {
    /// Softmax-normalised weights as a graph node.
    pub fn normalized(&self, g: &mut Graph) -> Result<Var> {
        let l = g.param(self.logits);
        g.softmax(l, 0)
    }

    pub fn weights(&self, store: &ParamStore) -> Vec<f32> {
        let mut g = Graph::new(store);
        let w = self.normalized(&mut g).expect("finite logits");
        g.value(w).to_vec()
    }
}

/// Pooled emotion vector, `[1 × model_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct EmotionEmbedding(pub Var);

#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub cfg: EncoderConfig,
    pub conv: ConvSubsample,
    pub front_norm: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    pub speech_weights: LayerWeightSet,
    pub emotion_weights: LayerWeightSet,
}

impl SpeechEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let conv = ConvSubsample::new(
            store,
            "encoder.conv",
            cfg.input_feature_dim,
            cfg.model_dim,
            cfg.conv_layers,
            rng,
        );
        let front_norm = LayerNorm::new(store, "encoder.front_norm", cfg.model_dim);
        let att = cfg.attention();
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::new(store, &format!("encoder.layers.{i}"), &att, rng))
            .collect();
        let speech_weights = LayerWeightSet {
            logits: store.insert_const("encoder.speech_weights", &[cfg.num_layers], 0.0),
            purpose: WeightPurpose::Speech,
        };
        let emotion_weights = LayerWeightSet {
            logits: store.insert_const("encoder.emotion_weights", &[cfg.num_layers], 0.0),
            purpose: WeightPurpose::Emotion,
        };
        Ok(Self {
            cfg,
            conv,
            front_norm,
            blocks,
            speech_weights,
            emotion_weights,
        })
    }

    /// Subsampled, normalized, position-encoded front-end output.
    pub fn front_end(&self, g: &mut Graph, speech: &FeatureSequence) -> Result<Var> {
        if speech.dim() != self.cfg.input_feature_dim {
            return Err(Error::dim(
                "encoder input",
                &[speech.frames(), speech.dim()],
                &[self.cfg.input_feature_dim],
            ));
        }
        let x = g.constant(speech.to_tensor());
        let h = conv1d_subsample(g, x, &self.conv, self.cfg.conv_stride)?;
        let t = g.shape(h)[0];
        // without this the conv output is dwarfed by the unit-amplitude
        // positions, and stage 1 buries the emotion offset under content
        let h = self.front_norm.forward(g, h)?;
        let pos = g.constant(Tensor::new(
            vec![t, self.cfg.model_dim],
            sinusoidal_positions(t, self.cfg.model_dim),
        )?);
        g.add(h, pos)
    }

    /// Output of every transformer layer, in depth order.
    pub fn encode_layers(&self, g: &mut Graph, speech: &FeatureSequence) -> Result<Vec<Var>> {
        let mut h = self.front_end(g, speech)?;
        let att = self.cfg.attention();
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = transformer_block(g, h, block, &att)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// `Σᵢ softmax(logits)ᵢ · layerᵢ`.
pub fn weighted_layer_sum(g: &mut Graph, layers: &[Var], weights: &LayerWeightSet) -> Result<Var> {
    let w = weights.normalized(g)?;
    if g.shape(w)[0] != layers.len() {
        return Err(Error::dim(
            "weighted_layer_sum",
            &[layers.len()],
            g.shape(w),
        ));
    }
    g.weighted_sum(layers, w)
}

/// Weighted layer sum with the emotion set, mean-pooled over time.
pub fn emotion_embedding(
    g: &mut Graph,
    layers: &[Var],
    weights: &LayerWeightSet,
) -> Result<EmotionEmbedding> {
    let seq = weighted_layer_sum(g, layers, weights)?;
    Ok(EmotionEmbedding(g.mean_rows(seq)?))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{synth_speech, EmotionLabel};

    fn encoder(cfg: EncoderConfig) -> (ParamStore, SpeechEncoder) {
        let mut store = ParamStore::new();
        let enc = SpeechEncoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (store, enc)
    }

    #[test]
    fn layer_outputs_follow_config() {
        let (store, enc) = encoder(EncoderConfig::default());
        let speech = synth_speech("abcd", EmotionLabel::Neutral, 0).unwrap();
        let mut g = Graph::new(&store);
        let layers = enc.encode_layers(&mut g, &speech).unwrap();
        assert_eq!(layers.len(), 4);
        for l in layers {
            assert_eq!(g.shape(l), &[4, 64]);
        }
    }

    #[test]
    fn zeroed_blocks_repeat_the_front_end() {
        let (mut store, enc) = encoder(EncoderConfig::default());
        for b in &enc.blocks {
            b.zero_output_projections(&mut store);
        }
        let speech = synth_speech("hello", EmotionLabel::Angry, 1).unwrap();
        let mut g = Graph::new(&store);
        let front = enc.front_end(&mut g, &speech).unwrap();
        let layers = enc.encode_layers(&mut g, &speech).unwrap();
        for l in layers {
            assert_eq!(g.value(l), g.value(front));
        }
    }

    #[test]
    fn short_input_is_rejected() {
        let (store, enc) = encoder(EncoderConfig::default());
        let speech = FeatureSequence::new(2, 32, vec![0.0; 64]).unwrap();
        let mut g = Graph::new(&store);
        assert!(matches!(
            enc.encode_layers(&mut g, &speech),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn weighted_sum_examples() {
        let mut store = ParamStore::new();
        let set = LayerWeightSet {
            logits: store.insert_const("w", &[2], 0.0),
            purpose: WeightPurpose::Speech,
        };
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let y = weighted_layer_sum(&mut g, &[a, b], &set).unwrap();
        assert_eq!(g.value(y), &[2.0]);
        assert!(weighted_layer_sum(&mut g, &[a], &set).is_err());

        store
            .get_mut(set.logits)
            .value
            .data_mut()
            .copy_from_slice(&[1000.0, 0.0]);
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2], vec![7.0, 9.0]).unwrap());
        let y = weighted_layer_sum(&mut g, &[a, b], &set).unwrap();
        assert_eq!(g.value(y), &[1.5, -2.0]);
    }

    #[test]
    fn emotion_pooling() {
        let mut store = ParamStore::new();
        let set = LayerWeightSet {
            logits: store.insert_const("w", &[1], 0.0),
            purpose: WeightPurpose::Emotion,
        };
        let mut g = Graph::new(&store);
        let l = g.constant(Tensor::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap());
        let e = emotion_embedding(&mut g, &[l], &set).unwrap();
        assert_eq!(g.value(e.0), &[2.0, 2.0]);

        let single = g.constant(Tensor::from_rows(&[vec![0.3, -1.7]]).unwrap());
        let e = emotion_embedding(&mut g, &[single], &set).unwrap();
        assert_eq!(g.value(e.0), &[0.3, -1.7]);
    }

    #[test]
    fn emotion_logits_do_not_touch_speech_sum() {
        let (mut store, enc) = encoder(EncoderConfig::default());
        let speech = synth_speech("howdy", EmotionLabel::Sad, 2).unwrap();
        let run = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let layers = enc.encode_layers(&mut g, &speech).unwrap();
            let s = weighted_layer_sum(&mut g, &layers, &enc.speech_weights).unwrap();
            let e = emotion_embedding(&mut g, &layers, &enc.emotion_weights).unwrap();
            (g.value(s).to_vec(), g.value(e.0).to_vec())
        };
        let (s0, e0) = run(&store);
        store
            .get_mut(enc.emotion_weights.logits)
            .value
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        let (s1, e1) = run(&store);
        assert_eq!(s0, s1);
        assert_ne!(e0, e1);
    }
}

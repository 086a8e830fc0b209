//! The assembled model: encoder, connector, decoder and the auxiliary
//! emotion classifier, all sharing one parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connector::{Connector, ConnectorConfig};
use crate::data::{EmotionLabel, FeatureSequence, Tokenizer, EOS, NUM_EMOTIONS};
use crate::decoder::{argmax, AssembledInput, DecoderConfig, DecoderLm, Stage};
use crate::encoder::{
    emotion_embedding, weighted_layer_sum, EmotionEmbedding, EncoderConfig, SpeechEncoder,
};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub connector: ConnectorConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.connector.decoder_dim != self.decoder.decoder_dim {
            return Err(Error::Config(format!(
                "connector.decoder_dim {} does not match decoder.decoder_dim {}",
                self.connector.decoder_dim, self.decoder.decoder_dim
            )));
        }
        Ok(())
    }

    /// A small configuration for tests and smoke runs.
    pub fn tiny() -> Self {
        let encoder = EncoderConfig {
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            ..Default::default()
        };
        let connector = ConnectorConfig {
            num_layers: 1,
            num_heads: 2,
            ff_dim: 32,
            decoder_dim: 16,
        };
        let decoder = DecoderConfig {
            num_layers: 2,
            decoder_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            ..Default::default()
        };
        Self {
            encoder,
            connector,
            decoder,
        }
    }
}

/// Coarse parameter partition used by the freeze schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    EncoderBackbone,
    SpeechWeights,
    EmotionWeights,
    Connector,
    Decoder,
    EmotionHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::EncoderBackbone,
        ParamGroup::SpeechWeights,
        ParamGroup::EmotionWeights,
        ParamGroup::Connector,
        ParamGroup::Decoder,
        ParamGroup::EmotionHead,
    ];

    pub fn of(param_name: &str) -> Option<ParamGroup> {
        let group = if param_name == "encoder.speech_weights" {
            ParamGroup::SpeechWeights
        } else if param_name == "encoder.emotion_weights" {
            ParamGroup::EmotionWeights
        } else if param_name.starts_with("encoder.") {
            ParamGroup::EncoderBackbone
        } else if param_name.starts_with("connector.") {
            ParamGroup::Connector
        } else if param_name.starts_with("decoder.") {
            ParamGroup::Decoder
        } else if param_name.starts_with("emotion_head.") {
            ParamGroup::EmotionHead
        } else {
            return None;
        };
        Some(group)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::EncoderBackbone => "encoder.backbone",
            ParamGroup::SpeechWeights => "encoder.speech_weights",
            ParamGroup::EmotionWeights => "encoder.emotion_weights",
            ParamGroup::Connector => "connector",
            ParamGroup::Decoder => "decoder",
            ParamGroup::EmotionHead => "emotion_head",
        }
    }
}

/// Linear classifier over the pooled emotion embedding.
#[derive(Debug, Clone)]
pub struct EmotionHead {
    pub linear: Linear,
}

impl EmotionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, model_dim: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, "emotion_head", model_dim, NUM_EMOTIONS, rng),
        }
    }

    /// `[1 × NUM_EMOTIONS]` logits.
    pub fn logits(&self, g: &mut Graph, emo: EmotionEmbedding) -> Result<Var> {
        self.linear.forward(g, emo.0)
    }
}

/// Decoder-space prefix inputs for one utterance.
#[derive(Debug, Clone, Copy)]
pub struct Prefix {
    pub speech_dec: Var,
    pub emo_dec: Option<Var>,
    pub emotion_logits: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub token_ids: Vec<usize>,
    pub text: String,
    pub emotion: Option<EmotionLabel>,
}

#[derive(Debug, Clone)]
pub struct EChatModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: SpeechEncoder,
    pub connector: Connector,
    pub decoder: DecoderLm,
    pub emotion_head: EmotionHead,
    /// Last completed training stage; 0 for a fresh or text-pretrained model.
    pub trained_stage: u8,
}

impl EChatModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = SpeechEncoder::new(&mut store, config.encoder, &mut rng)?;
        let connector = Connector::new(
            &mut store,
            config.connector,
            config.encoder.model_dim,
            &mut rng,
        )?;
        let decoder = DecoderLm::new(&mut store, config.decoder, &mut rng)?;
        let emotion_head = EmotionHead::new(&mut store, config.encoder.model_dim, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            connector,
            decoder,
            emotion_head,
            trained_stage: 0,
        })
    }

    /// Freeze everything outside `groups`.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        self.store
            .set_trainable(|name| ParamGroup::of(name).is_some_and(|g| groups.contains(&g)));
    }

    /// Encoder, layer aggregation and connector for one utterance. The
    /// emotion path is built only for stage 2.
    pub fn prefix(&self, g: &mut Graph, stage: Stage, speech: &FeatureSequence) -> Result<Prefix> {
        let layers = self.encoder.encode_layers(g, speech)?;
        let seq = weighted_layer_sum(g, &layers, &self.encoder.speech_weights)?;
        let speech_dec = self.connector.connect_speech(g, seq)?;
        let (emo_dec, emotion_logits) = match stage {
            Stage::Stage1 => (None, None),
            Stage::Stage2 => {
                let emo = emotion_embedding(g, &layers, &self.encoder.emotion_weights)?;
                let logits = self.emotion_head.logits(g, emo)?;
                (Some(self.connector.connect_emotion(g, emo)?), Some(logits))
            }
        };
        Ok(Prefix {
            speech_dec,
            emo_dec,
            emotion_logits,
        })
    }

    pub fn assemble(
        &self,
        g: &mut Graph,
        stage: Stage,
        prefix: &Prefix,
        prompt_ids: &[usize],
        target_ids: &[usize],
    ) -> Result<AssembledInput> {
        self.decoder.assemble_input(
            g,
            stage,
            prefix.speech_dec,
            prefix.emo_dec,
            prompt_ids,
            target_ids,
        )
    }

    /// Greedy response for one utterance, plus the predicted emotion in stage 2.
    pub fn respond(
        &self,
        stage: Stage,
        speech: &FeatureSequence,
        prompt_ids: &[usize],
        max_len: usize,
    ) -> Result<Response> {
        let mut g = Graph::inference(&self.store);
        let prefix = self.prefix(&mut g, stage, speech)?;
        let inp = self.assemble(&mut g, stage, &prefix, prompt_ids, &[])?;
        let emotion = prefix.emotion_logits.map(|l| {
            EmotionLabel::from_id(argmax(g.value(l))).expect("head has one logit per label")
        });
        let prefix_tensor: Tensor = g.tensor(inp.embeddings);
        drop(g);
        let token_ids = self
            .decoder
            .greedy_decode(&self.store, &prefix_tensor, max_len, EOS)?;
        Ok(Response {
            text: Tokenizer.decode(&token_ids),
            token_ids,
            emotion,
        })
    }
}

//! Text-only pretraining of the decoder.
//!
//! The decoder is frozen during both speech stages, so it has to arrive
//! already knowing how to follow the two prompts. Here the speech slots are
//! filled with the token embeddings of the transcript (plus a little noise)
//! and the emotion slot with the embedding of the emotion's cue character,
//! using exactly the stage layouts. Only decoder parameters are trained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accumulate_batch, clip_global_norm, target_ids, Adam, ExampleLoss, LossBreakdown};
use super::{PROMPT_STAGE1, PROMPT_STAGE2};
use crate::data::{random_text, response_for, EmotionLabel, Tokenizer, DEFAULT_MAX_CHARS};
use crate::decoder::{decoder_loss, Stage};
use crate::error::{Error, Result};
use crate::model::{EChatModel, ParamGroup};
use crate::nn::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub clip_norm: f64,
    pub seed: u64,
    pub max_chars: usize,
    /// Half-width of the uniform noise added to slot embeddings.
    pub slot_noise: f32,
    pub prompt_stage1: String,
    pub prompt_stage2: String,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            clip_norm: 1.0,
            seed: 0,
            max_chars: DEFAULT_MAX_CHARS,
            slot_noise: 0.05,
            prompt_stage1: PROMPT_STAGE1.into(),
            prompt_stage2: PROMPT_STAGE2.into(),
        }
    }
}

struct TextTask {
    stage: Stage,
    slot_ids: Vec<usize>,
    emotion: Option<EmotionLabel>,
    targets: Vec<usize>,
    noise_seed: u64,
}

fn sample_task<R: Rng>(rng: &mut R, stage: Stage, max_chars: usize) -> Result<TextTask> {
    let text = random_text(rng, max_chars);
    let slot_ids = Tokenizer.encode(&text)?;
    let (emotion, targets) = match stage {
        Stage::Stage1 => (None, target_ids(&text)?),
        Stage::Stage2 => {
            let e = EmotionLabel::ALL[rng.gen_range(0..EmotionLabel::ALL.len())];
            (Some(e), target_ids(&response_for(&text, e))?)
        }
    };
    Ok(TextTask {
        stage,
        slot_ids,
        emotion,
        targets,
        noise_seed: rng.gen(),
    })
}

fn noisy_embedding(
    g: &mut Graph,
    model: &EChatModel,
    ids: &[usize],
    noise: f32,
    seed: u64,
) -> Result<Var> {
    let emb = model.decoder.embed_tokens(g, ids)?;
    if noise == 0.0 {
        return Ok(emb);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(emb).to_vec();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-noise..=noise)).collect();
    let jitter = g.constant(Tensor::new(shape, data)?);
    g.add(emb, jitter)
}

/// Trains only the decoder on text renderings of both tasks; transcription
/// and response examples alternate within each batch.
pub fn pretrain_decoder(
    model: &mut EChatModel,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<()> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(
            "pretraining needs a positive batch size and lr".into(),
        ));
    }
    model.set_trainable_groups(&[ParamGroup::Decoder]);
    let prompt1 = Tokenizer.encode_lossy(&cfg.prompt_stage1);
    let prompt2 = Tokenizer.encode_lossy(&cfg.prompt_stage2);
    let mut adam = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for step in 1..=cfg.steps {
        let tasks = (0..cfg.batch_size)
            .map(|i| {
                let stage = if i % 2 == 0 {
                    Stage::Stage1
                } else {
                    Stage::Stage2
                };
                sample_task(&mut rng, stage, cfg.max_chars)
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens: Vec<usize> = tasks.iter().map(|t| t.targets.len()).collect();
        let m = &*model;
        let mut out = accumulate_batch(&m.store, &tokens, 0.0, |g, i| {
            let t = &tasks[i];
            let speech = noisy_embedding(g, m, &t.slot_ids, cfg.slot_noise, t.noise_seed)?;
            let emo = match t.emotion {
                Some(e) => {
                    let cue = Tokenizer::char_id(e.cue_char())
                        .expect("cue characters are in the alphabet");
                    Some(noisy_embedding(
                        g,
                        m,
                        &[cue],
                        cfg.slot_noise,
                        !t.noise_seed,
                    )?)
                }
                None => None,
            };
            let prompt = if t.stage == Stage::Stage1 {
                &prompt1
            } else {
                &prompt2
            };
            let inp = m
                .decoder
                .assemble_input(g, t.stage, speech, emo, prompt, &t.targets)?;
            let logits = m.decoder.decoder_forward(g, &inp)?;
            Ok(ExampleLoss {
                l_dec: decoder_loss(g, logits, &inp)?,
                l_emo: None,
            })
        })?;
        clip_global_norm(&mut out.grads, cfg.clip_norm);
        adam.step(&mut model.store, &out.grads);
        on_step(step, &LossBreakdown::new(out.l_decoder, 0.0, 0.0));
    }
    Ok(())
}

//! Two-stage training: freeze schedule, combined loss, Adam, checkpoints.

mod adam;
mod checkpoint;
mod pretrain;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{
    decode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    CheckpointContents, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use pretrain::{pretrain_decoder, PretrainConfig};

use crate::data::{AsrExample, Corpus, DialogueExample, FeatureSequence, Tokenizer, EOS};
use crate::decoder::{decoder_loss, Stage, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{EChatModel, ModelConfig, ParamGroup};
use crate::nn::{Graph, ParamId, ParamStore, Var};

pub const PROMPT_STAGE1: &str = "Transcribe the speech.";
pub const PROMPT_STAGE2: &str =
    "You are requested to provide a comforting response based on the emotion conveyed in this speech.";

pub fn default_alpha(stage: Stage) -> f64 {
    match stage {
        Stage::Stage1 => 0.0,
        Stage::Stage2 => 0.1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// `None` means the stage default.
    pub alpha: Option<f64>,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub prompt_stage1: String,
    pub prompt_stage2: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Stage1)
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            alpha: None,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            prompt_stage1: PROMPT_STAGE1.into(),
            prompt_stage2: PROMPT_STAGE2.into(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| default_alpha(self.stage))
    }

    pub fn prompt(&self) -> &str {
        match self.stage {
            Stage::Stage1 => &self.prompt_stage1,
            Stage::Stage2 => &self.prompt_stage2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.alpha();
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {a}")));
        }
        if self.stage == Stage::Stage1 && a != 0.0 {
            return Err(Error::Config(
                "stage 1 has no emotion loss; alpha must be 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// `(1 − α)·l_decoder + α·l_emotion`, in 64-bit.
pub fn combine(l_decoder: f64, l_emotion: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * l_decoder + alpha * l_emotion
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_decoder: f64,
    pub l_emotion: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(l_decoder: f64, l_emotion: f64, alpha: f64) -> Self {
        Self {
            total: combine(l_decoder, l_emotion, alpha),
            l_decoder,
            l_emotion,
            alpha,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub total: f64,
    pub l_decoder: f64,
    pub l_emotion: f64,
    pub alpha: f64,
}

impl LogRecord {
    pub fn new(step: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            total: b.total,
            l_decoder: b.l_decoder,
            l_emotion: b.l_emotion,
            alpha: b.alpha,
        }
    }
}

pub fn trainable_set(stage: Stage) -> Vec<ParamGroup> {
    match stage {
        Stage::Stage1 => vec![
            ParamGroup::EncoderBackbone,
            ParamGroup::SpeechWeights,
            ParamGroup::EmotionWeights,
            ParamGroup::Connector,
        ],
        Stage::Stage2 => vec![
            ParamGroup::EmotionWeights,
            ParamGroup::Connector,
            ParamGroup::EmotionHead,
        ],
    }
}

/// Decoder target for transcription or response text.
pub fn target_ids(text: &str) -> Result<Vec<usize>> {
    let mut ids = Tokenizer.encode(text)?;
    ids.push(EOS);
    Ok(ids)
}

/// A batch for one training step.
#[derive(Debug, Clone)]
pub enum Batch<'a> {
    Asr(Vec<&'a AsrExample>),
    Dialogue(Vec<&'a DialogueExample>),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Asr(v) => v.len(),
            Batch::Dialogue(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-example graph outputs: mean decoder CE and, when present, emotion CE.
pub(crate) struct ExampleLoss {
    pub l_dec: Var,
    pub l_emo: Option<Var>,
}

pub(crate) struct BatchGrads {
    pub grads: Vec<(ParamId, Vec<f32>)>,
    pub l_decoder: f64,
    pub l_emotion: f64,
}

/// Runs one graph per example and accumulates parameter gradients in a
/// fixed order. Each example's decoder loss is weighted by its share of the
/// batch's target tokens, so the result equals a token-level mean over a
/// padded batch; the emotion loss is a plain mean over examples.
pub(crate) fn accumulate_batch<F>(
    store: &ParamStore,
    tokens: &[usize],
    alpha: f64,
    mut build: F,
) -> Result<BatchGrads>
where
    F: FnMut(&mut Graph, usize) -> Result<ExampleLoss>,
{
    let total_tokens: usize = tokens.iter().sum();
    if total_tokens == 0 {
        return Err(Error::Data("batch has no target tokens".into()));
    }
    let b = tokens.len() as f64;
    let mut acc: Vec<Option<Vec<f32>>> = (0..store.len()).map(|_| None).collect();
    let (mut l_dec_sum, mut l_emo_sum) = (0.0f64, 0.0f64);
    for (i, &n_i) in tokens.iter().enumerate() {
        let mut g = Graph::new(store);
        let ex = build(&mut g, i)?;
        let w_dec = (1.0 - alpha) * n_i as f64 / total_tokens as f64;
        l_dec_sum += g.value(ex.l_dec)[0] as f64 * n_i as f64;
        let mut objective = g.scale(ex.l_dec, w_dec as f32);
        if let Some(l_emo) = ex.l_emo {
            l_emo_sum += g.value(l_emo)[0] as f64;
            let e = g.scale(l_emo, (alpha / b) as f32);
            objective = g.add(objective, e)?;
        }
        if !g.requires_grad(objective) {
            continue;
        }
        for (id, grad) in g.backward(objective)?.into_param_grads() {
            match &mut acc[id.index()] {
                Some(a) => a.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                slot => *slot = Some(grad),
            }
        }
    }
    let grads = acc
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| (ParamId(i), g)))
        .collect();
    Ok(BatchGrads {
        grads,
        l_decoder: l_dec_sum / total_tokens as f64,
        l_emotion: l_emo_sum / b,
    })
}

/// Owns the optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    adam: Adam,
    prompt_ids: Vec<usize>,
}

impl Trainer {
    /// Validates `cfg` and applies the stage's freeze schedule to `model`.
    pub fn new(model: &mut EChatModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.set_trainable_groups(&trainable_set(cfg.stage));
        Ok(Self {
            adam: Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
            prompt_ids: Tokenizer.encode_lossy(cfg.prompt()),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn prompt_ids(&self) -> &[usize] {
        &self.prompt_ids
    }

    pub fn train_step(&mut self, model: &mut EChatModel, batch: &Batch) -> Result<LossBreakdown> {
        let stage = self.cfg.stage;
        let alpha = self.cfg.alpha();
        let items: Vec<(&FeatureSequence, Vec<usize>, Option<usize>)> = match (stage, batch) {
            (Stage::Stage1, Batch::Asr(v)) => v
                .iter()
                .map(|e| Ok((&e.speech, target_ids(&e.text)?, None)))
                .collect::<Result<_>>()?,
            (Stage::Stage2, Batch::Dialogue(v)) => v
                .iter()
                .map(|e| {
                    Ok((
                        &e.speech,
                        target_ids(&e.response_text)?,
                        Some(e.emotion.id()),
                    ))
                })
                .collect::<Result<_>>()?,
            (Stage::Stage1, _) => {
                return Err(Error::Data(
                    "stage 1 trains on speech recognition pairs".into(),
                ))
            }
            (Stage::Stage2, _) => {
                return Err(Error::Data("stage 2 trains on dialogue examples".into()))
            }
        };
        if items.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let tokens: Vec<usize> = items.iter().map(|(_, t, _)| t.len()).collect();
        let prompt = &self.prompt_ids;
        let m = &*model;
        let mut out = accumulate_batch(&m.store, &tokens, alpha, |g, i| {
            let (speech, targets, label) = &items[i];
            let prefix = m.prefix(g, stage, speech)?;
            let inp = m.assemble(g, stage, &prefix, prompt, targets)?;
            let logits = m.decoder.decoder_forward(g, &inp)?;
            let l_dec = decoder_loss(g, logits, &inp)?;
            let l_emo = match (prefix.emotion_logits, label) {
                (Some(logits), Some(label)) => {
                    Some(g.cross_entropy(logits, &[*label], IGNORE_INDEX)?)
                }
                _ => None,
            };
            Ok(ExampleLoss { l_dec, l_emo })
        })?;
        clip_global_norm(&mut out.grads, self.cfg.clip_norm);
        self.adam.step(&mut model.store, &out.grads);
        let l_emotion = if stage == Stage::Stage1 {
            0.0
        } else {
            out.l_emotion
        };
        Ok(LossBreakdown::new(out.l_decoder, l_emotion, alpha))
    }
}

/// Train for `cfg.steps` steps with a seeded reshuffle every epoch.
/// `on_step` sees the 1-based step number and its losses.
pub fn run_training(
    corpus: &Corpus,
    cfg: &TrainConfig,
    model_cfg: ModelConfig,
    init: Option<EChatModel>,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<EChatModel> {
    let mut model = match (cfg.stage, init) {
        (Stage::Stage2, None) => {
            return Err(Error::Config(
                "stage 2 must start from a stage 1 checkpoint".into(),
            ))
        }
        (Stage::Stage2, Some(m)) if m.trained_stage < 1 => {
            return Err(Error::Config(
                "stage 2 must start from a checkpoint that completed stage 1".into(),
            ))
        }
        (_, Some(m)) => m,
        (Stage::Stage1, None) => EChatModel::new(model_cfg, cfg.seed)?,
    };
    let n = corpus.len();
    if n == 0 {
        return Err(Error::Data("training corpus is empty".into()));
    }
    match (cfg.stage, corpus) {
        (Stage::Stage1, Corpus::Asr(_)) | (Stage::Stage2, Corpus::Dialogue(_)) => {}
        (stage, _) => {
            return Err(Error::Data(format!("corpus kind does not match {stage}")));
        }
    }
    let mut trainer = Trainer::new(&mut model, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=cfg.steps {
        if cursor >= order.len() {
            order = (0..n).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += idx.len();
        let batch = match corpus {
            Corpus::Asr(v) => Batch::Asr(idx.iter().map(|&i| &v[i]).collect()),
            Corpus::Dialogue(v) => Batch::Dialogue(idx.iter().map(|&i| &v[i]).collect()),
        };
        let losses = trainer.train_step(&mut model, &batch)?;
        on_step(step, &losses);
    }
    model.trained_stage = cfg.stage.number();
    Ok(model)
}

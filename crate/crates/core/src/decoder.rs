//! Causal decoder LM over mixed continuous and token embeddings.
//!
//! Stage layouts:
//!
//! ```text
//! stage 1: [BOS][speech × T'][prompt × P][targets × R]
//! stage 2: [BOS][emotion][speech × T'][prompt × P][targets × R]
//! ```
//!
//! Targets are fed teacher-forced; the loss at target position `i` uses the
//! logits of position `i − 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::nn::{
    transformer_block, AttentionConfig, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor,
    TransformerBlock, Var,
};

/// Target id used at positions that carry no loss.
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub decoder_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            decoder_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            vocab_size: VOCAB_SIZE,
            max_positions: 160,
        }
    }
}

impl DecoderConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.decoder_dim,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= BOS || self.max_positions == 0 {
            return Err(Error::Config(
                "decoder vocab and positions must be positive".into(),
            ));
        }
        self.attention().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    Stage1,
    #[serde(rename = "2")]
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2),
            other => Err(Error::Config(format!(
                "unknown stage {other}; expected 1 or 2"
            ))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}", self.number())
    }
}

#[derive(Debug, Clone)]
pub struct AssembledInput {
    /// `[L × decoder_dim]`, before positional embeddings.
    pub embeddings: Var,
    pub loss_mask: Vec<bool>,
    /// Token at each position where `loss_mask` is set, `IGNORE_INDEX` elsewhere.
    pub target_ids: Vec<usize>,
    pub stage: Stage,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }

    /// Targets shifted so that row `i` of the logits predicts position `i + 1`.
    pub fn shifted_targets(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.target_ids.iter().skip(1).copied().collect();
        out.push(IGNORE_INDEX);
        out
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLm {
    pub cfg: DecoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub lm_head: Linear,
}

impl DecoderLm {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.decoder_dim;
        let att = cfg.attention();
        let tok_emb = store.insert_uniform("decoder.tok_emb", &[cfg.vocab_size, d], d, rng);
        let pos_emb = store.insert_uniform("decoder.pos_emb", &[cfg.max_positions, d], d, rng);
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::new(store, &format!("decoder.layers.{i}"), &att, rng))
            .collect();
        Ok(Self {
            final_norm: LayerNorm::new(store, "decoder.final_norm", d),
            lm_head: Linear::new(store, "decoder.lm_head", d, cfg.vocab_size, rng),
            cfg,
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    pub fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.tok_emb);
        g.gather_rows(table, ids)
    }

    /// Lay out BOS, the optional emotion vector, speech frames, prompt and
    /// targets in the stage's order.
    pub fn assemble_input(
        &self,
        g: &mut Graph,
        stage: Stage,
        speech_dec: Var,
        emo_dec: Option<Var>,
        prompt_ids: &[usize],
        target_ids: &[usize],
    ) -> Result<AssembledInput> {
        match (stage, emo_dec.is_some()) {
            (Stage::Stage1, true) => {
                return Err(Error::Assembly(
                    "stage 1 input takes no emotion embedding".into(),
                ))
            }
            (Stage::Stage2, false) => {
                return Err(Error::Assembly(
                    "stage 2 input requires an emotion embedding".into(),
                ))
            }
            _ => {}
        }
        let d = self.cfg.decoder_dim;
        let ss = g.shape(speech_dec);
        if ss.len() != 2 || ss[1] != d {
            return Err(Error::dim("assemble_input speech", ss, &[d]));
        }
        let speech_len = ss[0];
        let mut parts = vec![self.embed_tokens(g, &[BOS])?];
        if let Some(e) = emo_dec {
            if g.shape(e) != [1, d] {
                return Err(Error::dim("assemble_input emotion", g.shape(e), &[1, d]));
            }
            parts.push(e);
        }
        parts.push(speech_dec);
        if !prompt_ids.is_empty() {
            parts.push(self.embed_tokens(g, prompt_ids)?);
        }
        if !target_ids.is_empty() {
            parts.push(self.embed_tokens(g, target_ids)?);
        }
        let embeddings = g.concat_rows(&parts)?;
        let prefix = 1 + usize::from(emo_dec.is_some()) + speech_len + prompt_ids.len();
        let len = prefix + target_ids.len();
        if len > self.cfg.max_positions {
            return Err(Error::Assembly(format!(
                "sequence length {len} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let mut loss_mask = vec![false; len];
        let mut targets = vec![IGNORE_INDEX; len];
        for (i, &t) in target_ids.iter().enumerate() {
            loss_mask[prefix + i] = true;
            targets[prefix + i] = t;
        }
        Ok(AssembledInput {
            embeddings,
            loss_mask,
            target_ids: targets,
            stage,
        })
    }

    /// Runs the causal stack over `embeddings` (`[L×D]`) and returns `[L×V]` logits.
    pub fn forward_embeddings(&self, g: &mut Graph, embeddings: Var) -> Result<Var> {
        let len = g.shape(embeddings)[0];
        if len > self.cfg.max_positions {
            return Err(Error::Assembly(format!(
                "sequence length {len} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let pos_table = g.param(self.pos_emb);
        let pos = g.slice_rows(pos_table, 0, len)?;
        let mut h = g.add(embeddings, pos)?;
        let att = self.cfg.attention();
        for block in &self.blocks {
            h = transformer_block(g, h, block, &att)?;
        }
        let h = self.final_norm.forward(g, h)?;
        self.lm_head.forward(g, h)
    }

    pub fn decoder_forward(&self, g: &mut Graph, inp: &AssembledInput) -> Result<Var> {
        self.forward_embeddings(g, inp.embeddings)
    }

    /// Greedy continuation of a prefix assembled with no targets. Stops at
    /// `eos_id` (not included) or after `max_len` tokens.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        prefix: &Tensor,
        max_len: usize,
        eos_id: usize,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let budget = max_len.min(self.cfg.max_positions.saturating_sub(prefix.shape()[0]));
        while out.len() < budget {
            let mut g = Graph::inference(store);
            let mut x = g.constant(prefix.clone());
            if !out.is_empty() {
                let toks = self.embed_tokens(&mut g, &out)?;
                x = g.concat_rows(&[x, toks])?;
            }
            let logits = self.forward_embeddings(&mut g, x)?;
            let v = self.cfg.vocab_size;
            let last = &g.value(logits)[g.value(logits).len() - v..];
            let next = argmax(last);
            if next == eos_id {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean next-token cross entropy over the masked target positions.
pub fn decoder_loss(g: &mut Graph, logits: Var, inp: &AssembledInput) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != inp.len() {
        return Err(Error::dim("decoder_loss", s, &[inp.len()]));
    }
    g.cross_entropy(logits, &inp.shifted_targets(), IGNORE_INDEX)
}

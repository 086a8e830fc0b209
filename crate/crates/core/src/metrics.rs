//! Objective scoring: CER, corpus BLEU, trigram-hash similarity and emotion
//! accuracy, plus the generate-then-score evaluation loop.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, EmotionLabel, Tokenizer, NUM_EMOTIONS};
use crate::decoder::Stage;
use crate::error::{Error, Result};
use crate::model::EChatModel;
use crate::train::{PROMPT_STAGE1, PROMPT_STAGE2};

pub const SIM_BUCKETS: usize = 256;

pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character edit distance over reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Metric("CER needs a nonempty reference".into()));
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

/// Total edits over total reference characters.
pub fn corpus_cer(references: &[String], hypotheses: &[String]) -> Result<f64> {
    check_lengths(references.len(), hypotheses.len())?;
    let (mut edits, mut chars) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        let r: Vec<char> = r.chars().collect();
        if r.is_empty() {
            return Err(Error::Metric("CER needs nonempty references".into()));
        }
        let h: Vec<char> = h.chars().collect();
        edits += levenshtein(&r, &h);
        chars += r.len();
    }
    Ok(edits as f64 / chars as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("{a} references but {b} hypotheses")));
    }
    if a == 0 {
        return Err(Error::Metric("cannot score an empty corpus".into()));
    }
    Ok(())
}

fn char_ngrams(s: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut out = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU over characters with spaces removed, on a 0 to 100 scale.
/// Orders above one use add-one smoothing.
pub fn corpus_bleu(references: &[String], hypotheses: &[String], max_n: usize) -> Result<f64> {
    check_lengths(references.len(), hypotheses.len())?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::Metric(format!(
            "max_n must be in 1..=4, got {max_n}"
        )));
    }
    let strip = |s: &str| s.chars().filter(|c| *c != ' ').collect::<Vec<char>>();
    let refs: Vec<Vec<char>> = references.iter().map(|s| strip(s)).collect();
    let hyps: Vec<Vec<char>> = hypotheses.iter().map(|s| strip(s)).collect();
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (r, h) in refs.iter().zip(&hyps) {
        for n in 1..=max_n {
            let rc = char_ngrams(r, n);
            for (g, c) in char_ngrams(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0f64;
    for n in 1..=max_n {
        let p = if n == 1 {
            matched[0] as f64 / total[0] as f64
        } else {
            (matched[n - 1] + 1) as f64 / (total[n - 1] + 1) as f64
        };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag of hashed character trigrams of `^s$`.
pub fn trigram_counts(s: &str) -> [u32; SIM_BUCKETS] {
    let chars: Vec<char> = std::iter::once('^')
        .chain(s.chars())
        .chain(std::iter::once('$'))
        .collect();
    let mut v = [0u32; SIM_BUCKETS];
    for w in chars.windows(3) {
        let tri: String = w.iter().collect();
        v[(fnv1a64(tri.as_bytes()) % SIM_BUCKETS as u64) as usize] += 1;
    }
    v
}

/// Cosine similarity of the trigram bags.
pub fn sim(reference: &str, hypothesis: &str) -> Result<f64> {
    if reference.is_empty() || hypothesis.is_empty() {
        return Err(Error::Metric("SIM needs two nonempty strings".into()));
    }
    let (a, b) = (trigram_counts(reference), trigram_counts(hypothesis));
    let dot = |x: &[u32], y: &[u32]| {
        x.iter()
            .zip(y)
            .map(|(&p, &q)| p as f64 * q as f64)
            .sum::<f64>()
    };
    Ok(dot(&a, &b) / (dot(&a, &a) * dot(&b, &b)).sqrt())
}

pub type Confusion = [[usize; NUM_EMOTIONS]; NUM_EMOTIONS];

/// Accuracy and a confusion matrix indexed `[gold][pred]`.
pub fn emotion_eval(gold: &[EmotionLabel], predicted: &[EmotionLabel]) -> Result<(f64, Confusion)> {
    if gold.len() != predicted.len() {
        return Err(Error::Metric(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Metric("no labels to score".into()));
    }
    let mut confusion = [[0usize; NUM_EMOTIONS]; NUM_EMOTIONS];
    for (g, p) in gold.iter().zip(predicted) {
        confusion[g.id()][p.id()] += 1;
    }
    let hits: usize = (0..NUM_EMOTIONS).map(|i| confusion[i][i]).sum();
    Ok((hits as f64 / gold.len() as f64, confusion))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    /// Cosine in [-1, 1]; shown ×100 in summaries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Confusion>,
    /// Fraction of responses equal to the gold string.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    pub n_examples: usize,
}

impl EvalReport {
    /// One line per metric, SIM scaled to 0 to 100.
    pub fn summary(&self) -> String {
        let mut lines = vec![format!("examples          {}", self.n_examples)];
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                lines.push(format!("{name:<18}{v:.4}"));
            }
        };
        push("cer", self.cer);
        push("bleu1", self.bleu1);
        push("bleu4", self.bleu4);
        push("sim(x100)", self.sim.map(|s| s * 100.0));
        push("emotion_accuracy", self.emotion_accuracy);
        push("exact_match", self.exact_match);
        lines.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub hypothesis: String,
    pub gold: String,
    pub pred_emotion: Option<EmotionLabel>,
    pub gold_emotion: Option<EmotionLabel>,
}

/// Something that produces an output for every utterance of a corpus.
pub trait Responder {
    fn predict(&self, corpus: &Corpus, stage: Stage) -> Result<Vec<Prediction>>;
}

/// Greedy decoding with a trained model.
pub struct ModelResponder<'a> {
    pub model: &'a EChatModel,
    pub prompt_stage1: Vec<usize>,
    pub prompt_stage2: Vec<usize>,
    pub max_len: usize,
}

impl<'a> ModelResponder<'a> {
    pub fn new(model: &'a EChatModel) -> Self {
        Self {
            model,
            prompt_stage1: Tokenizer.encode_lossy(PROMPT_STAGE1),
            prompt_stage2: Tokenizer.encode_lossy(PROMPT_STAGE2),
            max_len: 32,
        }
    }
}

impl Responder for ModelResponder<'_> {
    fn predict(&self, corpus: &Corpus, stage: Stage) -> Result<Vec<Prediction>> {
        if self.model.trained_stage < stage.number() {
            return Err(Error::Config(format!(
                "checkpoint has completed stage {} and cannot be scored as {stage}",
                self.model.trained_stage
            )));
        }
        let prompt = match stage {
            Stage::Stage1 => &self.prompt_stage1,
            Stage::Stage2 => &self.prompt_stage2,
        };
        match (stage, corpus) {
            (Stage::Stage1, Corpus::Asr(v)) => v
                .iter()
                .map(|e| {
                    let r = self.model.respond(stage, &e.speech, prompt, self.max_len)?;
                    Ok(Prediction {
                        id: e.id.clone(),
                        hypothesis: r.text,
                        gold: e.text.clone(),
                        pred_emotion: None,
                        gold_emotion: None,
                    })
                })
                .collect(),
            (Stage::Stage2, Corpus::Dialogue(v)) => v
                .iter()
                .map(|e| {
                    let r = self.model.respond(stage, &e.speech, prompt, self.max_len)?;
                    Ok(Prediction {
                        id: e.id.clone(),
                        hypothesis: r.text,
                        gold: e.response_text.clone(),
                        pred_emotion: r.emotion,
                        gold_emotion: Some(e.emotion),
                    })
                })
                .collect(),
            (stage, _) => Err(Error::Data(format!("test corpus does not match {stage}"))),
        }
    }
}

/// Returns every gold output unchanged; scores as a perfect system.
pub struct EchoResponder;

impl Responder for EchoResponder {
    fn predict(&self, corpus: &Corpus, stage: Stage) -> Result<Vec<Prediction>> {
        match (stage, corpus) {
            (Stage::Stage1, Corpus::Asr(v)) => Ok(v
                .iter()
                .map(|e| Prediction {
                    id: e.id.clone(),
                    hypothesis: e.text.clone(),
                    gold: e.text.clone(),
                    pred_emotion: None,
                    gold_emotion: None,
                })
                .collect()),
            (Stage::Stage2, Corpus::Dialogue(v)) => Ok(v
                .iter()
                .map(|e| Prediction {
                    id: e.id.clone(),
                    hypothesis: e.response_text.clone(),
                    gold: e.response_text.clone(),
                    pred_emotion: Some(e.emotion),
                    gold_emotion: Some(e.emotion),
                })
                .collect()),
            (stage, _) => Err(Error::Data(format!("test corpus does not match {stage}"))),
        }
    }
}

/// Score predictions in corpus order. Stage 1 gets CER; stage 2 gets BLEU,
/// SIM, exact match and emotion metrics.
pub fn score(predictions: &[Prediction], stage: Stage) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let refs: Vec<String> = predictions.iter().map(|p| p.gold.clone()).collect();
    let hyps: Vec<String> = predictions.iter().map(|p| p.hypothesis.clone()).collect();
    let mut report = EvalReport {
        cer: None,
        bleu1: None,
        bleu4: None,
        sim: None,
        emotion_accuracy: None,
        confusion: None,
        exact_match: None,
        n_examples: predictions.len(),
    };
    match stage {
        Stage::Stage1 => report.cer = Some(corpus_cer(&refs, &hyps)?),
        Stage::Stage2 => {
            report.bleu1 = Some(corpus_bleu(&refs, &hyps, 1)?);
            report.bleu4 = Some(corpus_bleu(&refs, &hyps, 4)?);
            let mut total = 0.0;
            for (r, h) in refs.iter().zip(&hyps) {
                // an empty generation shares nothing with the reference
                total += if h.is_empty() { 0.0 } else { sim(r, h)? };
            }
            report.sim = Some(total / refs.len() as f64);
            let exact = refs.iter().zip(&hyps).filter(|(r, h)| r == h).count();
            report.exact_match = Some(exact as f64 / refs.len() as f64);
            let gold: Option<Vec<EmotionLabel>> =
                predictions.iter().map(|p| p.gold_emotion).collect();
            let pred: Option<Vec<EmotionLabel>> =
                predictions.iter().map(|p| p.pred_emotion).collect();
            if let (Some(gold), Some(pred)) = (gold, pred) {
                let (acc, confusion) = emotion_eval(&gold, &pred)?;
                report.emotion_accuracy = Some(acc);
                report.confusion = Some(confusion);
            }
        }
    }
    Ok(report)
}

pub fn evaluate(
    responder: &dyn Responder,
    corpus: &Corpus,
    stage: Stage,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if corpus.is_empty() {
        return Err(Error::Data("test corpus is empty".into()));
    }
    let predictions = responder.predict(corpus, stage)?;
    Ok((score(&predictions, stage)?, predictions))
}

pub fn evaluate_model(
    model: &EChatModel,
    corpus: &Corpus,
    stage: Stage,
) -> Result<(EvalReport, Vec<Prediction>)> {
    evaluate(&ModelResponder::new(model), corpus, stage)
}

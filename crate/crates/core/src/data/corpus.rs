//! Seeded corpus generation and splitting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::{synth_speech, FeatureSequence};
use super::{EmotionLabel, Tokenizer};
use crate::error::{Error, Result};

pub const MIN_CHARS: usize = 3;
pub const DEFAULT_MAX_CHARS: usize = 20;
pub const NUM_SPEAKERS: u64 = 10;
pub const RESPONSE_PREFIX_CHARS: usize = 3;

/// Speech-recognition pair: transcript plus neutral speech.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrExample {
    pub id: String,
    pub text: String,
    pub speaker_seed: u64,
    pub speech: FeatureSequence,
}

/// One (question text, response, emotion, question speech) record.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueExample {
    pub id: String,
    pub question_text: String,
    pub response_text: String,
    pub emotion: EmotionLabel,
    pub speaker_seed: u64,
    pub speech: FeatureSequence,
}

pub fn random_text<R: Rng>(rng: &mut R, max_chars: usize) -> String {
    let alphabet: Vec<char> = Tokenizer::alphabet().chars().collect();
    let len = rng.gen_range(MIN_CHARS..=max_chars.max(MIN_CHARS));
    (0..len)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
        .collect()
}

pub fn speaker_seed(index: usize) -> u64 {
    index as u64 % NUM_SPEAKERS
}

pub fn gen_asr_corpus(n: usize, seed: u64, max_chars: usize) -> Result<Vec<AsrExample>> {
    if n == 0 {
        return Err(Error::Data("corpus size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let text = random_text(&mut rng, max_chars);
            let speaker_seed = speaker_seed(i);
            let speech = synth_speech(&text, EmotionLabel::Neutral, speaker_seed)?;
            Ok(AsrExample {
                id: format!("asr-{i:06}"),
                text,
                speaker_seed,
                speech,
            })
        })
        .collect()
}

pub fn response_for(question: &str, emotion: EmotionLabel) -> String {
    let prefix: String = question.chars().take(RESPONSE_PREFIX_CHARS).collect();
    format!("{} {prefix}", emotion.keyword())
}

/// Exact per-class counts for `n` labels: every class but neutral gets
/// `floor(n·share)`, neutral takes the remainder.
pub fn emotion_quota(n: usize) -> [usize; 5] {
    let mut counts = [0usize; 5];
    for (c, share) in counts.iter_mut().zip(EmotionLabel::SHARES).take(4) {
        *c = (n as f64 * share).floor() as usize;
    }
    counts[4] = n - counts[..4].iter().sum::<usize>();
    counts
}

pub fn gen_dialogue_corpus(n: usize, seed: u64) -> Result<Vec<DialogueExample>> {
    if n == 0 {
        return Err(Error::Data("corpus size must be at least 1".into()));
    }
    let mut labels: Vec<EmotionLabel> = emotion_quota(n)
        .iter()
        .zip(EmotionLabel::ALL)
        .flat_map(|(&c, e)| std::iter::repeat(e).take(c))
        .collect();
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE40_7104);
    labels.shuffle(&mut label_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, emotion)| {
            let question_text = random_text(&mut rng, DEFAULT_MAX_CHARS);
            let speaker_seed = speaker_seed(i);
            let speech = synth_speech(&question_text, emotion, speaker_seed)?;
            Ok(DialogueExample {
                id: format!("dlg-{i:06}"),
                response_text: response_for(&question_text, emotion),
                question_text,
                emotion,
                speaker_seed,
                speech,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.80,
            valid: 0.07,
            test: 0.13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle followed by a contiguous train/valid/test cut.
pub fn split_corpus<T: Clone>(corpus: &[T], ratios: SplitRatios, seed: u64) -> Result<Split<T>> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot split an empty corpus".into()));
    }
    let total = ratios.train + ratios.valid + ratios.test;
    if (total - 1.0).abs() > 1e-9
        || [ratios.train, ratios.valid, ratios.test]
            .iter()
            .any(|r| *r < 0.0)
    {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
    let n_valid = ((n as f64 * ratios.valid).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
    })
}

//! Parametric "speech" synthesizer.
//!
//! Every character becomes [`FRAMES_PER_CHAR`] frames of
//! `char_vec(c) + 0.5·emotion_basis(e) + 0.05·jitter(speaker, i, frame)`.
//! The emotion bases are the first five coordinate axes; character vectors
//! are unit vectors supported on the remaining axes, so emotion and content
//! never overlap.

use crate::data::{EmotionLabel, Tokenizer};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const FEATURE_DIM: usize = 32;
pub const FRAMES_PER_CHAR: usize = 4;
pub const EMOTION_SCALE: f32 = 0.5;
pub const JITTER_SCALE: f32 = 0.05;

const CHAR_SEED: u64 = 0x0E_C4A7_5EED;

/// T×F matrix of synthetic speech frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 || data.len() != frames * dim {
            return Err(Error::dim(
                "feature sequence",
                &[frames, dim],
                &[data.len()],
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature sequence"));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.dim], self.data.clone()).expect("checked shape")
    }

    /// Average over time.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut m = vec![0.0f64; self.dim];
        for t in 0..self.frames {
            for (a, &v) in m.iter_mut().zip(self.frame(t)) {
                *a += v as f64;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.frames as f64);
        m
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based uniform draw in [-1, 1).
fn hash_uniform(keys: &[u64]) -> f32 {
    let h = keys
        .iter()
        .fold(0x5851_F42D_4C95_7F2Du64, |acc, &k| splitmix64(acc ^ k));
    let unit = (h >> 40) as f64 / (1u64 << 24) as f64;
    (2.0 * unit - 1.0) as f32
}

pub fn emotion_basis(e: EmotionLabel) -> [f32; FEATURE_DIM] {
    let mut v = [0.0; FEATURE_DIM];
    v[e.id()] = 1.0;
    v
}

/// Fixed unit vector for a character, orthogonal to every emotion basis.
pub fn unit_char_vec(c: char) -> [f32; FEATURE_DIM] {
    let mut v = [0.0f32; FEATURE_DIM];
    for (d, x) in v.iter_mut().enumerate().skip(EmotionLabel::ALL.len()) {
        *x = hash_uniform(&[CHAR_SEED, c as u64, d as u64]);
    }
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    v
}

fn jitter(speaker_seed: u64, index: usize, frame: usize, d: usize) -> f32 {
    hash_uniform(&[speaker_seed, index as u64, frame as u64, d as u64])
}

pub fn synth_speech(
    text: &str,
    emotion: EmotionLabel,
    speaker_seed: u64,
) -> Result<FeatureSequence> {
    if text.is_empty() {
        return Err(Error::Data("cannot synthesize empty text".into()));
    }
    Tokenizer::validate(text)?;
    let basis = emotion_basis(emotion);
    let n = text.chars().count();
    let mut data = Vec::with_capacity(n * FRAMES_PER_CHAR * FEATURE_DIM);
    for (i, c) in text.chars().enumerate() {
        let cv = unit_char_vec(c);
        for f in 0..FRAMES_PER_CHAR {
            for d in 0..FEATURE_DIM {
                data.push(
                    cv[d] + EMOTION_SCALE * basis[d] + JITTER_SCALE * jitter(speaker_seed, i, f, d),
                );
            }
        }
    }
    FeatureSequence::new(n * FRAMES_PER_CHAR, FEATURE_DIM, data)
}

//! Synthetic corpora: tokenizer, parametric speech, dialogue tuples.

mod corpus;
mod emotion;
pub mod io;
pub mod synth;
mod tokenizer;

pub use corpus::{
    emotion_quota, gen_asr_corpus, gen_dialogue_corpus, random_text, response_for, speaker_seed,
    split_corpus, AsrExample, DialogueExample, Split, SplitRatios, DEFAULT_MAX_CHARS, MIN_CHARS,
    NUM_SPEAKERS,
};
pub use emotion::{EmotionLabel, NUM_EMOTIONS};
pub use io::{load_corpus, Corpus, ManifestEntry};
pub use synth::{synth_speech, FeatureSequence, FEATURE_DIM, FRAMES_PER_CHAR};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, UNK, VOCAB_SIZE};

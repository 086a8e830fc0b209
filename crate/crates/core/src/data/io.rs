//! On-disk corpus layout: a JSONL manifest per split plus one binary
//! feature file per utterance.
//!
//! Feature files are `b"FEAT"`, `u32 T`, `u32 F`, then `T·F` little-endian
//! f32 values in row-major order.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{AsrExample, DialogueExample};
use super::synth::{FeatureSequence, FEATURE_DIM, FRAMES_PER_CHAR};
use super::EmotionLabel;
use crate::error::{Error, Result};

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";
pub const FEATURE_SUBDIR: &str = "feats";

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + seq.data().len() * 4);
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for v in seq.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < 12 || &bytes[..4] != FEAT_MAGIC {
        return Err(Error::Data("not a FEAT file".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != t * f * 4 {
        return Err(Error::Data(format!(
            "FEAT header says {t}x{f} but body has {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureSequence::new(t, f, data)
}

/// One manifest line. `emotion` and `response` are null for ASR corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub text: String,
    pub emotion: Option<EmotionLabel>,
    pub response: Option<String>,
    pub speech_path: String,
    pub speaker_seed: u64,
}

fn feature_rel_path(id: &str) -> String {
    format!("{FEATURE_SUBDIR}/{id}.feat")
}

impl ManifestEntry {
    pub fn from_asr(ex: &AsrExample) -> Self {
        Self {
            id: ex.id.clone(),
            text: ex.text.clone(),
            emotion: None,
            response: None,
            speech_path: feature_rel_path(&ex.id),
            speaker_seed: ex.speaker_seed,
        }
    }

    pub fn from_dialogue(ex: &DialogueExample) -> Self {
        Self {
            id: ex.id.clone(),
            text: ex.question_text.clone(),
            emotion: Some(ex.emotion),
            response: Some(ex.response_text.clone()),
            speech_path: feature_rel_path(&ex.id),
            speaker_seed: ex.speaker_seed,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Write feature files for `entries` under `dir` (paths taken from the entries).
pub fn write_features<'a>(
    dir: &Path,
    items: impl IntoIterator<Item = (&'a ManifestEntry, &'a FeatureSequence)>,
) -> Result<()> {
    for (entry, seq) in items {
        write_file(&dir.join(&entry.speech_path), &encode_features(seq))?;
    }
    Ok(())
}

fn load_speech(base: &Path, entry: &ManifestEntry) -> Result<FeatureSequence> {
    let path: PathBuf = base.join(&entry.speech_path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let seq =
        decode_features(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let want_t = entry.text.chars().count() * FRAMES_PER_CHAR;
    if seq.dim() != FEATURE_DIM || seq.frames() != want_t {
        return Err(Error::Data(format!(
            "{}: features are {}x{}, manifest text implies {want_t}x{FEATURE_DIM}",
            entry.id,
            seq.frames(),
            seq.dim()
        )));
    }
    Ok(seq)
}

/// A loaded manifest: either transcription pairs or dialogue tuples.
#[derive(Debug, Clone, PartialEq)]
pub enum Corpus {
    Asr(Vec<AsrExample>),
    Dialogue(Vec<DialogueExample>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Asr(v) => v.len(),
            Corpus::Dialogue(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Read a manifest and every feature file it references. Feature paths are
/// resolved relative to the manifest's directory.
pub fn load_corpus(manifest: &Path) -> Result<Corpus> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let dialogue = entries
        .iter()
        .any(|e| e.emotion.is_some() || e.response.is_some());
    if dialogue {
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let (Some(emotion), Some(response)) = (e.emotion, e.response.clone()) else {
                return Err(Error::Data(format!(
                    "{}: dialogue manifest entry missing emotion or response",
                    e.id
                )));
            };
            out.push(DialogueExample {
                speech: load_speech(base, &e)?,
                id: e.id,
                question_text: e.text,
                response_text: response,
                emotion,
                speaker_seed: e.speaker_seed,
            });
        }
        Ok(Corpus::Dialogue(out))
    } else {
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            out.push(AsrExample {
                speech: load_speech(base, &e)?,
                id: e.id,
                text: e.text,
                speaker_seed: e.speaker_seed,
            });
        }
        Ok(Corpus::Asr(out))
    }
}

/// Write `examples` as `<dir>/<name>.jsonl` plus their feature files.
pub fn write_asr_split(dir: &Path, name: &str, examples: &[AsrExample]) -> Result<()> {
    let entries: Vec<_> = examples.iter().map(ManifestEntry::from_asr).collect();
    write_features(dir, entries.iter().zip(examples.iter().map(|e| &e.speech)))?;
    write_manifest(&dir.join(format!("{name}.jsonl")), &entries)
}

pub fn write_dialogue_split(dir: &Path, name: &str, examples: &[DialogueExample]) -> Result<()> {
    let entries: Vec<_> = examples.iter().map(ManifestEntry::from_dialogue).collect();
    write_features(dir, entries.iter().zip(examples.iter().map(|e| &e.speech)))?;
    write_manifest(&dir.join(format!("{name}.jsonl")), &entries)
}

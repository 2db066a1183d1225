//! Speech corpora: manifests, word alignments, frame spans and partitions.
//!
//! A corpus manifest is a JSON list of entries
//! `{id, speaker, audio, alignment, annotations?, transcript?}` whose paths are
//! resolved relative to the manifest's directory. Alignment files are JSON lists
//! of `{word, start_s, end_s}`, or Praat TextGrids when the file name ends in
//! `.TextGrid`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, PathContext, Result};
use crate::features::HOPSIZE;
use crate::textgrid::{parse_textgrid, textgrid_to_alignment};

/// Tokens emitted by forced aligners for pauses. They belong to no word.
const SILENCE_TOKENS: &[&str] = &["", "sp", "sil", "<sil>", "<sp>", "spn"];

// Slack for float round-off when a frame boundary was written back as seconds.
const FRAME_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub token: String,
    /// Inclusive.
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
}

impl WordSpan {
    pub fn new(token: impl Into<String>, start_frame: usize, end_frame: usize) -> Self {
        Self {
            token: token.into(),
            start_frame,
            end_frame,
        }
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }

    /// Center frame; even-length spans take the lower of the two middle frames.
    pub fn center(&self) -> usize {
        (self.start_frame + self.end_frame - 1) / 2
    }
}

/// Checks that spans are non-empty, ordered, non-overlapping and inside `[0, frames)`.
pub fn validate_spans(spans: &[WordSpan], frames: usize) -> Result<()> {
    let mut previous_end = 0;
    for span in spans {
        if span.is_empty() || span.end_frame > frames || span.start_frame < previous_end {
            return Err(Error::Span {
                start: span.start_frame,
                end: span.end_frame,
                frames,
            });
        }
        previous_end = span.end_frame;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub audio_ref: PathBuf,
    pub sample_rate: u32,
    pub num_samples: usize,
    pub words: Vec<WordSpan>,
    pub annotation_ref: Option<PathBuf>,
}

impl Utterance {
    /// Frame count of the audio on the feature grid: `ceil(samples / hopsize)`.
    pub fn frame_count(&self) -> usize {
        self.num_samples.div_ceil(HOPSIZE)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|w| w.token.as_str())
    }
}

/// One word of a forced alignment, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub word: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: String,
    pub audio: PathBuf,
    pub alignment: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = serde_json::from_slice(bytes)?;
    let mut seen = BTreeSet::new();
    for entry in &entries {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::format(
                "corpus manifest",
                format!("duplicate utterance id `{}`", entry.id),
            ));
        }
    }
    Ok(entries)
}

pub fn parse_alignment(bytes: &[u8]) -> Result<Vec<AlignedWord>> {
    let words: Vec<AlignedWord> = serde_json::from_slice(bytes)?;
    for word in &words {
        if !word.start_s.is_finite() || !word.end_s.is_finite() || word.start_s < 0.0 {
            return Err(Error::format("alignment", format!("bad interval for `{}`", word.word)));
        }
    }
    Ok(words)
}

pub fn is_silence_token(token: &str) -> bool {
    let trimmed = token.trim();
    SILENCE_TOKENS.iter().any(|s| trimmed.eq_ignore_ascii_case(s))
}

/// Converts a word interval in seconds to a frame span.
///
/// The start frame is floored and the end frame rounded, and every word keeps at
/// least one frame.
pub fn seconds_to_frames(start_s: f64, end_s: f64, hopsize: usize, sample_rate: u32) -> Result<(usize, usize)> {
    if !(start_s >= 0.0 && start_s < end_s && end_s.is_finite()) || hopsize == 0 {
        return Err(Error::InvalidInterval {
            start: start_s,
            end: end_s,
        });
    }
    let rate = sample_rate as f64 / hopsize as f64;
    let start = (start_s * rate + FRAME_EPSILON).floor() as usize;
    let end = (end_s * rate).round() as usize;
    Ok((start, end.max(start + 1)))
}

/// Builds frame spans from an alignment, dropping silence tokens, resolving
/// rounding overlaps between neighbours and clamping to the audio length.
pub fn spans_from_alignment(
    utterance: &str,
    alignment: &[AlignedWord],
    sample_rate: u32,
    frames: usize,
) -> Result<Vec<WordSpan>> {
    let mut words: Vec<&AlignedWord> = alignment.iter().filter(|w| !is_silence_token(&w.word)).collect();
    words.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));

    let mut spans: Vec<WordSpan> = Vec::with_capacity(words.len());
    for word in words {
        let (start, end) = seconds_to_frames(word.start_s, word.end_s, HOPSIZE, sample_rate)?;
        let mut span = WordSpan::new(word.word.trim(), start, end.min(frames));
        if let Some(previous) = spans.last_mut() {
            if span.start_frame < previous.end_frame {
                // Rounding pushed the previous end into this word.
                previous.end_frame = span.start_frame.max(previous.start_frame + 1);
                if span.start_frame < previous.end_frame {
                    span.start_frame = previous.end_frame;
                    span.end_frame = span.end_frame.max(span.start_frame + 1);
                }
            }
        }
        if span.end_frame > frames || span.is_empty() {
            return Err(Error::Load {
                utterance: utterance.to_string(),
                reason: format!(
                    "word `{}` at {:.3}s lies beyond the audio ({frames} frames)",
                    span.token, word.start_s
                ),
            });
        }
        spans.push(span);
    }
    Ok(spans)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_path(path)
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Loads every utterance described by a corpus manifest.
pub fn load_corpus(manifest: &Path) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&read(manifest)?)?;
    entries.iter().map(|entry| load_entry(base, entry)).collect()
}

/// Loads one manifest entry; relative paths resolve against `base`.
pub fn load_entry(base: &Path, entry: &ManifestEntry) -> Result<Utterance> {
    let audio = resolve(base, &entry.audio);
    let load_error = |reason: String| Error::Load {
        utterance: entry.id.clone(),
        reason,
    };
    let reader = hound::WavReader::open(&audio).map_err(|e| load_error(format!("{}: {e}", audio.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(load_error(format!(
            "expected mono audio, found {} channels",
            spec.channels
        )));
    }
    let num_samples = reader.duration() as usize;

    let alignment_path = resolve(base, &entry.alignment);
    let alignment_bytes =
        fs::read(&alignment_path).map_err(|e| load_error(format!("{}: {e}", alignment_path.display())))?;
    let is_textgrid = alignment_path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("textgrid"));
    let alignment = if is_textgrid {
        let text = String::from_utf8_lossy(&alignment_bytes);
        textgrid_to_alignment(&parse_textgrid(&text)?)?
    } else {
        parse_alignment(&alignment_bytes)?
    };
    let frames = num_samples.div_ceil(HOPSIZE);
    let words = spans_from_alignment(&entry.id, &alignment, spec.sample_rate, frames)?;

    if let Some(transcript) = &entry.transcript {
        let expected = transcript.split_whitespace().count();
        if expected != words.len() {
            return Err(Error::AlignmentMismatch {
                utterance: entry.id.clone(),
                aligned: words.len(),
                transcript: expected,
            });
        }
    }
    if words.is_empty() {
        return Err(load_error("alignment contains no words".into()));
    }

    Ok(Utterance {
        id: entry.id.clone(),
        speaker_id: entry.speaker.clone(),
        audio_ref: audio,
        sample_rate: spec.sample_rate,
        num_samples,
        words,
        annotation_ref: entry.annotations.as_ref().map(|p| resolve(base, p)),
    })
}

/// Writes a manifest and one alignment file per utterance into `dir`.
///
/// Audio and annotation files are referenced, not copied. Reloading the
/// manifest yields the same utterances.
pub fn write_corpus(dir: &Path, utterances: &[Utterance]) -> Result<PathBuf> {
    let alignments = dir.join("alignments");
    fs::create_dir_all(&alignments).with_path(&alignments)?;
    let mut entries = Vec::with_capacity(utterances.len());
    for utterance in utterances {
        let frame_seconds = HOPSIZE as f64 / utterance.sample_rate as f64;
        let words: Vec<AlignedWord> = utterance
            .words
            .iter()
            .map(|w| AlignedWord {
                word: w.token.clone(),
                start_s: w.start_frame as f64 * frame_seconds,
                end_s: w.end_frame as f64 * frame_seconds,
            })
            .collect();
        let file = alignments.join(format!("{}.json", sanitize(&utterance.id)));
        fs::write(&file, serde_json::to_vec_pretty(&words)?).with_path(&file)?;
        entries.push(ManifestEntry {
            id: utterance.id.clone(),
            speaker: utterance.speaker_id.clone(),
            audio: fs::canonicalize(&utterance.audio_ref).unwrap_or(utterance.audio_ref.clone()),
            alignment: file.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(file),
            annotations: utterance.annotation_ref.clone(),
            transcript: None,
        });
    }
    let manifest = dir.join("manifest.json");
    fs::write(&manifest, serde_json::to_vec_pretty(&entries)?).with_path(&manifest)?;
    Ok(manifest)
}

pub(crate) fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Splits utterance ids into train/valid/test.
///
/// Validation and test sizes are floored; the remainder goes to train. The
/// result depends only on the id set, the ratios and the seed.
pub fn partition_ids<'a, I>(ids: I, ratios: (f64, f64, f64), seed: u64) -> Result<Partition>
where
    I: IntoIterator<Item = &'a str>,
{
    let (train_ratio, valid_ratio, test_ratio) = ratios;
    let total = train_ratio + valid_ratio + test_ratio;
    if (total - 1.0).abs() > 1e-9 || [train_ratio, valid_ratio, test_ratio].iter().any(|r| *r < 0.0) {
        return Err(Error::Partition(format!(
            "ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let unique: BTreeSet<&str> = ids.into_iter().collect();
    let mut ids: Vec<String> = unique.into_iter().map(str::to_string).collect();
    if ids.len() < 3 {
        return Err(Error::Partition(format!(
            "need at least 3 utterances, got {}",
            ids.len()
        )));
    }
    let n = ids.len() as f64;
    let valid = (n * valid_ratio + 1e-9).floor() as usize;
    let test = (n * test_ratio + 1e-9).floor() as usize;

    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_ids = ids.split_off(ids.len() - test);
    let valid_ids = ids.split_off(ids.len() - valid);
    Ok(Partition {
        train: ids,
        valid: valid_ids,
        test: test_ids,
        seed,
    })
}

pub fn partition_corpus(utterances: &[Utterance], ratios: (f64, f64, f64), seed: u64) -> Result<Partition> {
    partition_ids(utterances.iter().map(|u| u.id.as_str()), ratios, seed)
}

//! Synthetic corpora with known prominence, for tests and smoke runs.
//!
//! Each utterance is a sequence of harmonic tone "words" separated by short
//! silences. A word's prominence is its RMS divided by the largest word RMS
//! in the utterance.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotations::AnnotationRecord;
use crate::corpus::WordSpan;
use crate::dataset::Example;
use crate::error::Result;
use crate::features::{melspectrogram, HOPSIZE, SAMPLE_RATE};

#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub id: String,
    pub audio: Vec<f32>,
    pub spans: Vec<WordSpan>,
    pub word_rms: Vec<f64>,
}

impl SyntheticUtterance {
    /// Word RMS normalized by the utterance maximum.
    pub fn prominence(&self) -> Vec<f64> {
        let max = self.word_rms.iter().copied().fold(0.0, f64::max);
        self.word_rms.iter().map(|r| r / max).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ToneWord {
    pub frames: usize,
    pub gap_after: usize,
    pub f0: f64,
    pub amplitude: f64,
}

/// Renders tone words into audio with 30 ms fades at word edges.
pub fn render(id: impl Into<String>, words: &[ToneWord], lead_frames: usize) -> SyntheticUtterance {
    let mut audio = vec![0.0f32; lead_frames * HOPSIZE];
    let mut spans = Vec::with_capacity(words.len());
    let mut word_rms = Vec::with_capacity(words.len());
    let rate = SAMPLE_RATE as f64;
    let fade = (0.03 * rate) as usize;
    for (i, word) in words.iter().enumerate() {
        let start_frame = audio.len() / HOPSIZE;
        let samples = word.frames * HOPSIZE;
        let mut energy = 0.0;
        for n in 0..samples {
            let time = n as f64 / rate;
            let phase = 2.0 * std::f64::consts::PI * word.f0 * time;
            let tone = phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin();
            let envelope = (n.min(samples - 1 - n) as f64 / fade as f64).min(1.0);
            let value = word.amplitude * envelope * tone / 1.2;
            energy += value * value;
            audio.push(value as f32);
        }
        spans.push(WordSpan::new(format!("w{i}"), start_frame, start_frame + word.frames));
        word_rms.push((energy / samples as f64).sqrt());
        audio.extend(std::iter::repeat(0.0).take(word.gap_after * HOPSIZE));
    }
    audio.extend(std::iter::repeat(0.0).take(lead_frames * HOPSIZE));
    SyntheticUtterance {
        id: id.into(),
        audio,
        spans,
        word_rms,
    }
}

/// Random utterance of 3–7 words with log-uniform amplitudes over 26 dB.
pub fn random_utterance<R: Rng>(rng: &mut R, id: impl Into<String>) -> SyntheticUtterance {
    let count = rng.gen_range(3..=7);
    let words: Vec<ToneWord> = (0..count)
        .map(|_| ToneWord {
            frames: rng.gen_range(12..=28),
            gap_after: rng.gen_range(1..=5),
            f0: rng.gen_range(100.0..220.0),
            amplitude: 0.02 * 20f64.powf(rng.gen::<f64>()),
        })
        .collect();
    render(id, &words, 3)
}

pub fn utterances(count: usize, seed: u64) -> Vec<SyntheticUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| random_utterance(&mut rng, format!("syn{i:04}")))
        .collect()
}

/// Examples whose targets are normalized word RMS energy.
pub fn energy_examples(count: usize, seed: u64) -> Result<Vec<Example>> {
    utterances(count, seed)
        .into_iter()
        .map(|u| {
            let mel = melspectrogram(&u.audio)?;
            let prominence = u.prominence();
            Example::new(u.id, mel.values, u.spans, Some(prominence))
        })
        .collect()
}

/// Draws `annotators` independent Bernoulli emphasis labels per word.
pub fn sample_annotations<R: Rng>(
    rng: &mut R,
    utterance_id: &str,
    prominence: &[f64],
    annotators: &[String],
) -> Vec<AnnotationRecord> {
    annotators
        .iter()
        .map(|a| {
            let labels = prominence.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect();
            AnnotationRecord::new(a.clone(), utterance_id, labels)
        })
        .collect()
}

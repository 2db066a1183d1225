//! Training-free prominence baseline: continuous wavelet transform of a
//! composite prosodic signal.
//!
//! The composite signal is the weighted sum of three z-scored components on
//! the Mel frame grid: log F0 (autocorrelation tracker, interpolated through
//! unvoiced frames), log frame energy and word duration. Word scores are the
//! largest positive Mexican-hat coefficient inside the word across a dyadic
//! range of scales.

use serde::{Deserialize, Serialize};

use crate::corpus::WordSpan;
use crate::error::{Error, Result};
use crate::evaluation::pearson;
use crate::features::{reflect_index, HOPSIZE, SAMPLE_RATE};

/// Analysis window for F0 and energy, in samples (40 ms).
const ANALYSIS_WINDOW: usize = 640;
const MIN_F0: f64 = 60.0;
const MAX_F0: f64 = 400.0;
/// Minimum normalized autocorrelation for a voiced frame.
const VOICING_THRESHOLD: f64 = 0.5;
/// Frames quieter than this fraction of the loudest frame are unvoiced.
const SILENCE_RATIO: f64 = 0.02;
const ENERGY_FLOOR: f64 = 1e-5;
/// About a third of a semitone.
const LOG_F0_MIN_STD: f64 = 0.02;
/// Half-width of the median filter over voiced F0 frames.
const MEDIAN_RADIUS: usize = 2;

/// Mexican-hat scales in frames (10 ms each): roughly syllable to phrase length.
pub const SCALES: [f64; 5] = [4.0, 8.0, 16.0, 32.0, 64.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub f0: f64,
    pub energy: f64,
    pub duration: f64,
}

impl Default for ComponentWeights {
    fn default() -> Self {
        Self {
            f0: 1.0,
            energy: 1.0,
            duration: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsodicSignal {
    pub values: Vec<f64>,
    pub f0: Vec<f64>,
    pub energy: Vec<f64>,
    pub duration: Vec<f64>,
    pub weights: ComponentWeights,
    pub warnings: Vec<String>,
}

impl ProsodicSignal {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Z-score over the given values; constant inputs map to zeros.
fn zscore(values: &[f64]) -> Vec<f64> {
    zscore_with_floor(values, 0.0)
}

/// Z-score dividing by at least `min_std`, so that jitter below the floor
/// stays small instead of being stretched to unit variance.
fn zscore_with_floor(values: &[f64], min_std: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std.max(min_std)).collect()
}

fn frame_window(audio: &[f32], frame: usize) -> impl Iterator<Item = f64> + '_ {
    let center = (frame * HOPSIZE) as isize;
    let half = (ANALYSIS_WINDOW / 2) as isize;
    (0..ANALYSIS_WINDOW as isize).map(move |n| {
        let i = center - half + n;
        if i < 0 || i as usize >= audio.len() {
            0.0
        } else {
            audio[i as usize] as f64
        }
    })
}

/// Frame RMS on the feature grid.
pub fn frame_rms(audio: &[f32], frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|t| {
            let energy: f64 = frame_window(audio, t).map(|x| x * x).sum();
            (energy / ANALYSIS_WINDOW as f64).sqrt()
        })
        .collect()
}

/// Autocorrelation F0 tracker. Returns Hz per frame, `None` when unvoiced.
pub fn track_f0(audio: &[f32], frames: usize) -> Vec<Option<f64>> {
    let rate = SAMPLE_RATE as f64;
    let min_lag = (rate / MAX_F0).floor() as usize;
    let max_lag = (rate / MIN_F0).ceil() as usize;
    let rms = frame_rms(audio, frames);
    let loudest = rms.iter().copied().fold(0.0, f64::max);
    (0..frames)
        .map(|t| {
            if loudest == 0.0 || rms[t] < SILENCE_RATIO * loudest {
                return None;
            }
            let window: Vec<f64> = frame_window(audio, t).collect();
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            let x: Vec<f64> = window.iter().map(|v| v - mean).collect();
            let correlation = |lag: usize| {
                let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
                for n in 0..x.len() - lag {
                    xy += x[n] * x[n + lag];
                    xx += x[n] * x[n];
                    yy += x[n + lag] * x[n + lag];
                }
                if xx > 0.0 && yy > 0.0 {
                    xy / (xx * yy).sqrt()
                } else {
                    0.0
                }
            };
            let scores: Vec<f64> = (min_lag..=max_lag).map(correlation).collect();
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if best < VOICING_THRESHOLD {
                return None;
            }
            let mut chosen = scores.iter().position(|&s| s == best).unwrap();
            // Octave guard: prefer a lag at half or a third of the best when
            // it correlates almost as well.
            for divisor in [3, 2] {
                let lag = (min_lag + chosen) / divisor;
                let candidate = (lag.saturating_sub(1)..=lag + 1)
                    .filter(|&l| l >= min_lag && l <= max_lag)
                    .map(|l| l - min_lag)
                    .max_by(|&a, &b| scores[a].total_cmp(&scores[b]));
                if let Some(i) = candidate.filter(|&i| scores[i] >= 0.9 * best) {
                    chosen = i;
                    break;
                }
            }
            // Parabolic refinement of the peak to a fractional lag.
            let mut lag = (min_lag + chosen) as f64;
            if chosen > 0 && chosen + 1 < scores.len() {
                let (a, b, c) = (scores[chosen - 1], scores[chosen], scores[chosen + 1]);
                let curvature = a - 2.0 * b + c;
                if curvature < 0.0 {
                    lag += (0.5 * (a - c) / curvature).clamp(-0.5, 0.5);
                }
            }
            Some(rate / lag)
        })
        .collect()
}

/// Median over the voiced frames within `MEDIAN_RADIUS` of each voiced
/// frame; removes single-frame errors at voicing onsets and offsets.
fn median_smooth(track: &[Option<f64>]) -> Vec<Option<f64>> {
    (0..track.len())
        .map(|t| {
            track[t]?;
            let lo = t.saturating_sub(MEDIAN_RADIUS);
            let hi = (t + MEDIAN_RADIUS + 1).min(track.len());
            let mut near: Vec<f64> = track[lo..hi].iter().flatten().copied().collect();
            near.sort_by(f64::total_cmp);
            Some(near[near.len() / 2])
        })
        .collect()
}

/// Linear interpolation through `None` frames, constant extension at the
/// edges. Returns `None` if no frame has a value.
fn interpolate(values: &[Option<f64>]) -> Option<Vec<f64>> {
    let known: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .collect();
    let (&first, &last) = (known.first()?, known.last()?);
    let mut out = vec![0.0; values.len()];
    let mut segment = 0;
    for (t, slot) in out.iter_mut().enumerate() {
        *slot = if t <= first.0 {
            first.1
        } else if t >= last.0 {
            last.1
        } else {
            while known[segment + 1].0 < t {
                segment += 1;
            }
            let ((x0, y0), (x1, y1)) = (known[segment], known[segment + 1]);
            y0 + (y1 - y0) * (t - x0) as f64 / (x1 - x0) as f64
        };
    }
    Some(out)
}

/// Builds the composite prosodic signal for an utterance.
pub fn composite_signal(audio: &[f32], spans: &[WordSpan], weights: ComponentWeights) -> Result<ProsodicSignal> {
    if audio.is_empty() {
        return Err(Error::Input("empty audio".into()));
    }
    let frames = audio.len().div_ceil(HOPSIZE);
    crate::corpus::validate_spans(spans, frames)?;
    let mut warnings = Vec::new();

    let f0 = match interpolate(&median_smooth(&track_f0(audio, frames))) {
        Some(hz) => zscore_with_floor(&hz.iter().map(|f| f.ln()).collect::<Vec<_>>(), LOG_F0_MIN_STD),
        None => {
            warnings.push("no voiced frames; F0 component zeroed".to_string());
            log::warn!("{}", warnings.last().unwrap());
            vec![0.0; frames]
        }
    };

    let log_energy: Vec<f64> = frame_rms(audio, frames)
        .iter()
        .map(|r| r.max(ENERGY_FLOOR).ln())
        .collect();
    let energy = zscore(&log_energy);

    // Duration is z-scored over word frames only; gap frames sit at the mean.
    let lengths: Vec<f64> = spans
        .iter()
        .flat_map(|s| std::iter::repeat(s.len() as f64).take(s.len()))
        .collect();
    let normalized = zscore(&lengths);
    let mut duration = vec![0.0; frames];
    let mut cursor = normalized.iter();
    for span in spans {
        for slot in &mut duration[span.start_frame..span.end_frame] {
            *slot = *cursor.next().expect("one value per word frame");
        }
    }

    let values = (0..frames)
        .map(|t| weights.f0 * f0[t] + weights.energy * energy[t] + weights.duration * duration[t])
        .collect::<Vec<_>>();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite prosodic signal".into()));
    }
    Ok(ProsodicSignal {
        values,
        f0,
        energy,
        duration,
        weights,
        warnings,
    })
}

/// Zero-mean, unit-energy sampled Mexican-hat wavelet at `scale` frames.
fn mexican_hat(scale: f64) -> Vec<f64> {
    let half = (4.0 * scale).ceil() as isize;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|n| {
            let u = n as f64 / scale;
            (1.0 - u * u) * (-0.5 * u * u).exp()
        })
        .collect();
    let mean = kernel.iter().sum::<f64>() / kernel.len() as f64;
    kernel.iter_mut().for_each(|k| *k -= mean);
    let norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    kernel.iter_mut().for_each(|k| *k /= norm);
    kernel
}

/// CWT coefficients `[scale][frame]` with reflected signal edges.
pub fn cwt(signal: &[f64], scales: &[f64]) -> Vec<Vec<f64>> {
    scales
        .iter()
        .map(|&scale| {
            let kernel = mexican_hat(scale);
            let half = (kernel.len() / 2) as isize;
            (0..signal.len())
                .map(|t| {
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(j, k)| k * signal[reflect_index(t as isize + j as isize - half, signal.len())])
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Per-word score: the largest positive CWT coefficient within the word.
pub fn wavelet_prominence(signal: &ProsodicSignal, spans: &[WordSpan]) -> Result<Vec<f64>> {
    let frames = signal.values.len();
    for span in spans {
        if span.is_empty() || span.end_frame > frames {
            return Err(Error::Span {
                start: span.start_frame,
                end: span.end_frame,
                frames,
            });
        }
    }
    let coefficients = cwt(&signal.values, &SCALES);
    Ok(spans
        .iter()
        .map(|span| {
            coefficients
                .iter()
                .flat_map(|row| row[span.start_frame..span.end_frame].iter())
                .fold(0.0, |best: f64, &c| best.max(c))
        })
        .collect())
}

/// Label 1 iff the score exceeds the threshold.
pub fn threshold_classify(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > threshold)).collect()
}

/// Threshold maximizing the Pearson correlation of the binarized scores with
/// the targets. Candidates are midpoints between consecutive distinct scores.
pub fn fit_threshold(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::Metric("score and target lengths differ".into()));
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut best: Option<(f64, f64)> = None;
    for pair in sorted.windows(2) {
        let threshold = 0.5 * (pair[0] + pair[1]);
        let labels: Vec<f64> = threshold_classify(scores, threshold)
            .iter()
            .map(|&l| l as f64)
            .collect();
        if let Ok(r) = pearson(&labels, targets) {
            if best.map_or(true, |(_, b)| r > b) {
                best = Some((threshold, r));
            }
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::UndefinedCorrelation("no threshold separates the scores".into()))
}

//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use prominence::annotations::AnnotationRecord;
use prominence::corpus::WordSpan;
use prominence::dataset::Example;
use prominence::experiments::AnnotatedUtterance;
use prominence::loss::LossKind;
use prominence::model::{upsample_targets, Location, Method, ModelConfig, ProminenceModel};
use prominence::rasch::sigmoid;
use prominence::synthetic::{render, SyntheticUtterance, ToneWord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straightforward loop version of frame-to-word downsampling.
pub fn brute_downsample(features: &Array2<f64>, spans: &[WordSpan], method: Method) -> Array2<f64> {
    let mut out = Array2::zeros((features.nrows(), spans.len()));
    for c in 0..features.nrows() {
        for (w, span) in spans.iter().enumerate() {
            let (s, e) = (span.start_frame, span.end_frame);
            out[[c, w]] = match method {
                Method::Sum | Method::Average => {
                    let mut total = 0.0;
                    for t in s..e {
                        total += features[[c, t]];
                    }
                    if method == Method::Sum {
                        total
                    } else {
                        total / (e - s) as f64
                    }
                }
                Method::Max => {
                    let mut best = features[[c, s]];
                    for t in s + 1..e {
                        if features[[c, t]] > best {
                            best = features[[c, t]];
                        }
                    }
                    best
                }
                Method::Center => features[[c, (s + e - 1) / 2]],
            };
        }
    }
    out
}

/// Random sorted, non-overlapping spans over `frames` frames.
pub fn random_spans<R: Rng>(rng: &mut R, frames: usize) -> Vec<WordSpan> {
    let mut spans = Vec::new();
    let mut t = rng.gen_range(0..3);
    while t < frames {
        let len = rng.gen_range(1..=8).min(frames - t);
        spans.push(WordSpan::new(format!("w{}", spans.len()), t, t + len));
        t += len + rng.gen_range(0..3);
    }
    spans
}

/// Loss recomputed from the public forward pass: elementwise BCE on logits or
/// squared error on bounded outputs, summed.
pub fn reference_loss(model: &ProminenceModel, mel: &Array2<f64>, spans: &[WordSpan], targets: &[f64]) -> f64 {
    let output = model.forward(mel.view(), spans).unwrap();
    let (scores, targets): (Vec<f64>, Vec<f64>) = if model.config.location == Location::Framewise {
        let frames = output.frame_scores.unwrap().to_vec();
        let upsampled = upsample_targets(targets, spans, mel.ncols()).unwrap();
        (frames, upsampled)
    } else {
        (output.word_scores.to_vec(), targets.to_vec())
    };
    scores
        .iter()
        .zip(&targets)
        .map(|(&x, &t)| match model.config.loss {
            LossKind::Bce => {
                let p = sigmoid(x);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            }
            LossKind::Mse => (x - t) * (x - t),
        })
        .sum()
}

/// 2-word, 20-frame instance with a leading, separating and trailing gap.
pub fn gradient_instance(seed: u64, channels: usize) -> (Array2<f64>, Vec<WordSpan>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mel = Array2::from_shape_fn((channels, 20), |_| rng.gen_range(-1.0..1.0));
    let spans = vec![WordSpan::new("a", 2, 9), WordSpan::new("b", 11, 18)];
    (mel, spans, vec![0.25, 0.75])
}

#[derive(Debug, Clone, Copy)]
pub struct GradientReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over input features.
    pub input_error: f64,
    /// Same over a random sample of parameters from every tensor.
    pub parameter_error: f64,
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central finite differences against the analytic gradients of the summed
/// loss, for every input feature and a sample of parameters.
pub fn gradient_check(config: ModelConfig, seed: u64, samples_per_tensor: usize) -> GradientReport {
    const H: f64 = 1e-5;
    let model = ProminenceModel::new(config, seed).unwrap();
    let (mel, spans, targets) = gradient_instance(seed + 1, model.config.input_channels);
    let step = model.loss_and_gradients(mel.view(), &spans, &targets, true).unwrap();
    let analytic_input = step.input_gradient.unwrap();

    let mut numeric_input = Vec::with_capacity(mel.len());
    let mut probe = mel.clone();
    for idx in ndarray::indices(mel.dim()) {
        let original = probe[idx];
        probe[idx] = original + H;
        let up = reference_loss(&model, &probe, &spans, &targets);
        probe[idx] = original - H;
        let down = reference_loss(&model, &probe, &spans, &targets);
        probe[idx] = original;
        numeric_input.push((up - down) / (2.0 * H));
    }
    let input_error = relative_error(&analytic_input.iter().copied().collect::<Vec<_>>(), &numeric_input);

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let grads = step.gradients.slices();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut perturbed = model.clone();
    for tensor in 0..grads.len() {
        let len = grads[tensor].len();
        for _ in 0..samples_per_tensor.min(len) {
            let i = rng.gen_range(0..len);
            let original = perturbed.parameters()[tensor][i];
            perturbed.parameters_mut()[tensor][i] = original + H;
            let up = reference_loss(&perturbed, &mel, &spans, &targets);
            perturbed.parameters_mut()[tensor][i] = original - H;
            let down = reference_loss(&perturbed, &mel, &spans, &targets);
            perturbed.parameters_mut()[tensor][i] = original;
            analytic.push(grads[tensor][i]);
            numeric.push((up - down) / (2.0 * H));
        }
    }
    GradientReport {
        input_error,
        parameter_error: relative_error(&analytic, &numeric),
    }
}

/// Batch of 20 records from one annotator, `overmarked` of which mark 7 of 9
/// words and the rest 1 of 9.
pub fn overmarked_batch(overmarked: usize) -> Vec<AnnotationRecord> {
    (0..20)
        .map(|i| {
            let marked = if i < overmarked { 7 } else { 1 };
            let labels = (0..9).map(|w| u8::from(w < marked)).collect();
            AnnotationRecord::new("worker", format!("utt{i:02}"), labels)
        })
        .collect()
}

/// Labels drawn from `σ(θ − b)` with abilities and difficulties evenly spread
/// over [−2, 2]: 20 annotators, 20 utterances of 10 words (200 items).
pub fn rasch_records(seed: u64) -> Vec<AnnotationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = |i: usize, n: usize| -4.0 * i as f64 / (n - 1) as f64 + 2.0;
    let mut records = Vec::new();
    for a in 0..20 {
        let theta = spread(a, 20);
        for u in 0..20 {
            let labels = (0..10)
                .map(|w| {
                    let b = spread(u * 10 + w, 200);
                    u8::from(rng.gen::<f64>() < sigmoid(theta - b))
                })
                .collect();
            records.push(AnnotationRecord::new(format!("a{a:02}"), format!("u{u:02}"), labels));
        }
    }
    records
}

/// Five equal-length words at 150 Hz; word `raised` has amplitude and pitch
/// raised by 50%.
pub fn raised_word_utterance(raised: usize) -> SyntheticUtterance {
    let words: Vec<ToneWord> = (0..5)
        .map(|i| {
            let factor = if i == raised { 1.5 } else { 1.0 };
            ToneWord {
                frames: 24,
                gap_after: 4,
                f0: 150.0 * factor,
                amplitude: 0.1 * factor,
            }
        })
        .collect();
    render("raised", &words, 5)
}

/// Utterances with dummy features and `counts[i]` annotators each, labels
/// drawn from a per-word prominence.
pub fn annotated_corpus(counts: &[usize], frames_per_word: usize, seed: u64) -> Vec<AnnotatedUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let words = rng.gen_range(2..=5);
            let spans: Vec<WordSpan> = (0..words)
                .map(|w| WordSpan::new(format!("w{w}"), w * frames_per_word, (w + 1) * frames_per_word))
                .collect();
            let truth: Vec<f64> = (0..words).map(|_| rng.gen::<f64>()).collect();
            let id = format!("r{i:05}");
            let records = (0..n)
                .map(|a| {
                    let labels = truth.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect();
                    AnnotationRecord::new(format!("ann{a}"), id.clone(), labels)
                })
                .collect();
            let mel = Array2::from_shape_fn((4, words * frames_per_word), |_| rng.gen::<f32>());
            AnnotatedUtterance {
                example: Example::new(id, mel, spans, None).unwrap(),
                records,
            }
        })
        .collect()
}

pub fn all_configs() -> Vec<ModelConfig> {
    Location::ALL
        .iter()
        .flat_map(|&l| Method::ALL.iter().map(move |&m| ModelConfig::new(l, m)))
        .collect()
}

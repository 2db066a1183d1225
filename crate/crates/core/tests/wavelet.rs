mod support;

use prominence::synthetic::{render, ToneWord};
use prominence::wavelet::{composite_signal, fit_threshold, threshold_classify, wavelet_prominence, ComponentWeights};

fn words(amplitudes: &[f64]) -> Vec<ToneWord> {
    amplitudes
        .iter()
        .map(|&amplitude| ToneWord {
            frames: 20,
            gap_after: 3,
            f0: 140.0,
            amplitude,
        })
        .collect()
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

#[test]
fn doubled_amplitude_raises_energy_over_that_word() {
    let base = render("a", &words(&[0.1, 0.1, 0.1, 0.1]), 4);
    let loud = render("b", &words(&[0.1, 0.2, 0.1, 0.1]), 4);
    let weights = ComponentWeights::default();
    let a = composite_signal(&base.audio, &base.spans, weights).unwrap();
    let b = composite_signal(&loud.audio, &loud.spans, weights).unwrap();
    let span = &loud.spans[1];
    let mean = |v: &[f64]| v[span.start_frame..span.end_frame].iter().sum::<f64>() / span.len() as f64;
    assert!(mean(&b.energy) > mean(&a.energy));
}

#[test]
fn constant_pitch_normalizes_to_zero() {
    let u = render("c", &words(&[0.1, 0.1, 0.1]), 4);
    let signal = composite_signal(&u.audio, &u.spans, ComponentWeights::default()).unwrap();
    assert!(signal.f0.iter().all(|v| v.abs() < 0.1), "{:?}", signal.f0);
}

#[test]
fn ranking_survives_positive_scaling_and_is_deterministic() {
    let u = render("d", &words(&[0.05, 0.2, 0.1, 0.02, 0.15]), 4);
    let signal = composite_signal(&u.audio, &u.spans, ComponentWeights::default()).unwrap();
    let scores = wavelet_prominence(&signal, &u.spans).unwrap();
    for factor in [0.01, 3.0, 250.0] {
        let scaled = wavelet_prominence(&signal.scaled(factor), &u.spans).unwrap();
        assert_eq!(ranking(&scaled), ranking(&scores));
    }
    let again = wavelet_prominence(
        &composite_signal(&u.audio, &u.spans, ComponentWeights::default()).unwrap(),
        &u.spans,
    )
    .unwrap();
    assert_eq!(
        again.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn raised_word_is_classified_as_emphasized() {
    let u = support::raised_word_utterance(3);
    let signal = composite_signal(&u.audio, &u.spans, ComponentWeights::default()).unwrap();
    let scores = wavelet_prominence(&signal, &u.spans).unwrap();
    let targets = [0.0, 0.0, 0.0, 1.0, 0.0];
    let threshold = fit_threshold(&scores, &targets).unwrap();
    assert_eq!(threshold_classify(&scores, threshold), [0, 0, 0, 1, 0]);
}

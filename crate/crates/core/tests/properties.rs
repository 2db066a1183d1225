mod support;

use ndarray::Array2;
use prominence::annotations::{aggregate_prominence, bot_filter, AnnotationRecord};
use prominence::corpus::{parse_manifest, partition_ids, ManifestEntry, WordSpan};
use prominence::evaluation::{bce_metric, pearson};
use prominence::model::{downsample, upsample_targets, Method};
use prominence::rasch::{fit_rasch, split_cells};
use prominence::training::make_batches;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use support::*;

fn spans_and_features() -> impl Strategy<Value = (Array2<f64>, Vec<WordSpan>)> {
    (1usize..5, 4usize..60, any::<u64>()).prop_filter_map("no spans", |(channels, frames, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans = random_spans(&mut rng, frames);
        (!spans.is_empty()).then(|| {
            use rand::Rng;
            let features = Array2::from_shape_fn((channels, frames), |_| rng.gen_range(-5.0..5.0));
            (features, spans)
        })
    })
}

fn labels(words: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, words)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn downsample_matches_loop((features, spans) in spans_and_features()) {
        for method in Method::ALL {
            let fast = downsample(features.view(), &spans, method).unwrap();
            let slow = brute_downsample(&features, &spans, method);
            for (a, b) in fast.iter().zip(&slow) {
                if method == Method::Average {
                    prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                } else {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn constant_frames_average_back_exactly(value in 0.0f64..=1.0, frames in 4usize..50, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans = random_spans(&mut rng, frames);
        prop_assume!(!spans.is_empty());
        let targets = vec![value; spans.len()];
        let up = upsample_targets(&targets, &spans, frames).unwrap();
        prop_assert!(up.iter().all(|&v| v == value));
        let row = Array2::from_shape_vec((1, frames), up).unwrap();
        let down = downsample(row.view(), &spans, Method::Average).unwrap();
        prop_assert!(down.iter().all(|&v| v == value));
    }

    #[test]
    fn upsampled_targets_hit_word_centers(values in prop::collection::vec(0.0f64..=1.0, 1..8), seed: u64) {
        let spans: Vec<WordSpan> = {
            let mut t = (seed % 3) as usize;
            values.iter().map(|_| { let s = WordSpan::new("w", t, t + 3 + (seed as usize + t) % 4); t = s.end_frame + 1; s }).collect()
        };
        let frames = spans.last().unwrap().end_frame + 2;
        let up = upsample_targets(&values, &spans, frames).unwrap();
        for (span, &v) in spans.iter().zip(&values) {
            prop_assert_eq!(up[span.center()], v);
        }
        let (lo, hi) = values.iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(up.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn bot_filter_ignores_order(rows in prop::collection::vec(labels(6), 20), seed: u64) {
        let batch: Vec<AnnotationRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, l)| AnnotationRecord::new("w", format!("u{i}"), l))
            .collect();
        let mut shuffled = batch.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(bot_filter(&batch).unwrap(), bot_filter(&shuffled).unwrap());
    }

    #[test]
    fn aggregate_recovers_counts(rows in prop::collection::vec(labels(7), 1..12)) {
        let records: Vec<AnnotationRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, l)| AnnotationRecord::new(format!("a{i}"), "u", l.clone()))
            .collect();
        let target = aggregate_prominence(&records).unwrap();
        let n = records.len() as f64;
        for (w, &p) in target.prominence.iter().enumerate() {
            let count = rows.iter().filter(|r| r[w] == 1).count();
            prop_assert!((p * n - count as f64).abs() < 1e-9);
            prop_assert_eq!(target.counts()[w], count);
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..50),
        scale in 0.01f64..100.0,
        shift in -100.0f64..100.0,
    ) {
        let (pred, target): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let base = pearson(&pred, &target);
        prop_assume!(base.is_ok());
        let moved: Vec<f64> = pred.iter().map(|p| scale * p + shift).collect();
        prop_assert!((pearson(&moved, &target).unwrap() - base.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pearson_is_bounded(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..30)) {
        let (pred, target): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(r) = pearson(&pred, &target) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn target_minimizes_bce(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40)) {
        let (pred, target): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(bce_metric(&target, &target).unwrap() <= bce_metric(&pred, &target).unwrap() + 1e-12);
    }

    #[test]
    fn batches_cover_items_within_budget(counts in prop::collection::vec(1usize..500, 1..80), seed: u64) {
        let max = 600;
        let batches = make_batches(&counts, max, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..counts.len()).collect::<Vec<_>>());
        for batch in &batches {
            prop_assert!(batch.iter().map(|&i| counts[i]).sum::<usize>() <= max);
        }
    }

    #[test]
    fn partitions_are_disjoint_and_complete(n in 3usize..200, seed: u64) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let p = partition_ids(ids.iter().map(String::as_str), (0.8, 0.1, 0.1), seed).unwrap();
        let mut all: Vec<String> = p.train.iter().chain(&p.valid).chain(&p.test).cloned().collect();
        all.sort();
        let mut expected = ids.clone();
        expected.sort();
        prop_assert_eq!(all, expected);
    }

    #[test]
    fn manifest_roundtrip(entries in prop::collection::btree_map("[a-z0-9_]{1,8}", ("[a-z]{1,4}", proptest::option::of("[a-z ]{0,20}")), 0..10)) {
        let manifest: Vec<ManifestEntry> = entries
            .into_iter()
            .map(|(id, (speaker, transcript))| ManifestEntry {
                audio: format!("audio/{id}.wav").into(),
                alignment: format!("align/{id}.json").into(),
                annotations: None,
                id,
                speaker,
                transcript,
            })
            .collect();
        let bytes = serde_json::to_vec(&manifest).unwrap();
        prop_assert_eq!(parse_manifest(&bytes).unwrap(), manifest);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rasch_predictions_survive_translation(seed in 0u64..1000, c in -20.0f64..20.0) {
        let records = rasch_records(seed);
        let fit = fit_rasch(&records, 0.1, seed).unwrap();
        let (_, heldout) = split_cells(&records, 0.1, seed);
        let shifted = fit.model.shifted(c);
        prop_assert!((shifted.accuracy(&heldout) - fit.heldout_accuracy).abs() <= 1e-9);
        let mean_b = fit.model.difficulties.values().sum::<f64>() / fit.model.difficulties.len() as f64;
        prop_assert!(mean_b.abs() < 1e-9);
    }
}

#[test]
fn identical_annotators_get_equal_abilities() {
    let mut records = Vec::new();
    for u in 0..30 {
        let labels: Vec<u8> = (0..5).map(|w| u8::from((u * 7 + w * 3) % 5 < 2)).collect();
        for a in ["x", "y"] {
            records.push(AnnotationRecord::new(a, format!("u{u}"), labels.clone()));
        }
    }
    let fit = fit_rasch(&records, 0.0, 1).unwrap();
    assert!((fit.model.abilities["x"] - fit.model.abilities["y"]).abs() < 1e-6);
}

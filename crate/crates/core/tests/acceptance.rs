//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Runs without the test harness so every line is printed; exits non-zero if
//! any criterion fails.

mod support;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use prominence::annotations::{bot_filter, read_targets_csv, BotVerdict};
use prominence::checkpoint::Checkpoint;
use prominence::corpus::{load_corpus, WordSpan};
use prominence::dataset::build_examples;
use prominence::evaluation::{bce_metric, evaluate, pearson};
use prominence::experiments::{redundancy_training_sets, PAPER_BUDGETS};
use prominence::features::{FeatureCache, FeatureConfig};
use prominence::model::{downsample, upsample_targets, Location, Method, ModelConfig};
use prominence::rasch::{fit_rasch, split_cells};
use prominence::synthetic::energy_examples;
use prominence::training::{train, TrainConfig};
use prominence::wavelet::{composite_signal, wavelet_prominence, ComponentWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use support::*;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn downsampling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    while cases < 100 {
        let frames = rng.gen_range(5..80);
        let spans = random_spans(&mut rng, frames);
        if spans.is_empty() {
            continue;
        }
        let channels = rng.gen_range(1..6);
        let features = Array2::from_shape_fn((channels, frames), |_| rng.gen_range(-10.0..10.0));
        for method in Method::ALL {
            let fast = downsample(features.view(), &spans, method).unwrap();
            let slow = brute_downsample(&features, &spans, method);
            let ok = fast.iter().zip(&slow).all(|(&a, &b)| match method {
                Method::Average => (a - b).abs() <= 1e-6 * b.abs().max(f64::MIN_POSITIVE),
                _ => a.to_bits() == b.to_bits(),
            });
            if !ok {
                return Outcome::Fail(format!("case {cases}, method {method}: {fast:?} vs {slow:?}"));
            }
        }
        cases += 1;
    }
    Outcome::Pass("100 instances x 4 methods; sum/max/center bitwise, average within 1e-6".into())
}

fn upsample_consistency() -> Outcome {
    for (value, start, end, frames) in [(0.37, 3, 17, 25), (0.0, 0, 1, 1), (1.0, 0, 40, 40), (0.125, 10, 11, 30)] {
        let spans = [WordSpan::new("w", start, end)];
        let up = upsample_targets(&[value], &spans, frames).unwrap();
        let row = Array2::from_shape_vec((1, frames), up).unwrap();
        let down = downsample(row.view(), &spans, Method::Average).unwrap()[[0, 0]];
        if down != value {
            return Outcome::Fail(format!("{value} came back as {down}"));
        }
    }
    Outcome::Pass("average of upsampled single-word target is exact".into())
}

fn gradient_checks() -> Outcome {
    let reports: Vec<(ModelConfig, GradientReport)> = all_configs()
        .into_par_iter()
        .map(|config| (config.clone(), gradient_check(config, 3, 4)))
        .collect();
    let worst = reports
        .iter()
        .map(|(_, r)| r.input_error.max(r.parameter_error))
        .fold(0.0, f64::max);
    let failing: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !(r.input_error <= 1e-3 && r.parameter_error <= 1e-3))
        .map(|(c, r)| {
            format!(
                "{}+{} ({:.2e}/{:.2e})",
                c.location, c.method, r.input_error, r.parameter_error
            )
        })
        .collect();
    verdict(
        failing.is_empty(),
        if failing.is_empty() {
            format!("16 configurations, worst relative error {worst:.2e}")
        } else {
            format!("failing: {}", failing.join(", "))
        },
    )
}

fn learnability() -> Outcome {
    let examples = energy_examples(200, 7).unwrap();
    let (train_set, valid_set) = examples.split_at(180);
    let config = TrainConfig {
        max_steps: 400,
        validate_every: 50,
        max_frames_per_batch: 3000,
        seed: 1,
        ..TrainConfig::default()
    };
    let hash = FeatureConfig::default().hash();
    let run = |location| {
        let model = ModelConfig::new(location, Method::Sum);
        let outcome = train(&model, &config, train_set, valid_set, &hash).unwrap();
        outcome.best.validation_pearson.unwrap_or(f64::NEG_INFINITY)
    };
    let intermediate = run(Location::Intermediate);
    let framewise = run(Location::Framewise);
    verdict(
        intermediate > 0.9 && framewise < intermediate,
        format!(
            "intermediate+sum {intermediate:.3}, framewise+sum {framewise:.3} after {} steps",
            config.max_steps
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-9 {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    expect(
        "anti-correlation",
        pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
        -1.0,
    );
    expect("identity", pearson(&[0.1, 0.7, 0.3], &[0.1, 0.7, 0.3]).unwrap(), 1.0);
    expect(
        "affine",
        pearson(&[2.3, 3.5, 2.9], &[0.1, 0.7, 0.4]).unwrap(),
        pearson(&[0.1, 0.7, 0.4], &[0.1, 0.7, 0.4]).unwrap(),
    );
    // deviations (-1.5, -0.5, 0.5, 1.5) and (-1.5, 0.5, -0.5, 1.5): cov 4, var 5
    expect(
        "hand example",
        pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
        0.8,
    );
    expect(
        "fair coin",
        bce_metric(&[0.5; 4], &[0.5; 4]).unwrap(),
        std::f64::consts::LN_2,
    );
    expect("single word", bce_metric(&[0.9], &[1.0]).unwrap(), -(0.9f64).ln());
    expect(
        "confident",
        bce_metric(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
        -(1.0 - 1e-6f64).ln(),
    );
    let constant = pearson(&[1.0, 1.0], &[0.0, 1.0]).is_err();
    if !constant {
        failures.push("constant input accepted".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..20);
        let target: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        if bce_metric(&target, &target).unwrap() > bce_metric(&pred, &target).unwrap() {
            violations += 1;
        }
    }
    if violations > 0 {
        failures.push(format!("BCE minimizer violated in {violations} of 1000 vectors"));
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "closed forms within 1e-9; target minimizes BCE on 1000 random vectors".into()
        } else {
            failures.join("; ")
        },
    )
}

fn bot_threshold() -> Outcome {
    let eight = bot_filter(&overmarked_batch(8)).unwrap();
    let seven = bot_filter(&overmarked_batch(7)).unwrap();
    let mut silent = overmarked_batch(0);
    silent.iter_mut().for_each(|r| r.labels.iter_mut().for_each(|l| *l = 0));
    let zero = bot_filter(&silent).unwrap();
    verdict(
        eight == BotVerdict::Fail && seven == BotVerdict::Pass && zero == BotVerdict::Pass,
        format!("8 over-marked -> {eight:?}, 7 -> {seven:?}, none -> {zero:?}"),
    )
}

fn rasch_recovery() -> Outcome {
    let records = rasch_records(21);
    let fit = fit_rasch(&records, 0.1, 4).unwrap();
    let (_, heldout) = split_cells(&records, 0.1, 4);
    let margin = fit.heldout_accuracy - fit.majority_baseline;
    let mut gauge_gap: f64 = 0.0;
    for c in [-3.7, 0.5, 12.0] {
        let shifted = fit.model.shifted(c);
        gauge_gap = gauge_gap.max((shifted.accuracy(&heldout) - fit.heldout_accuracy).abs());
        for cell in &heldout {
            let p = fit.model.probability(&cell.annotator, &cell.item);
            gauge_gap = gauge_gap.max((shifted.probability(&cell.annotator, &cell.item) - p).abs());
        }
    }
    verdict(
        margin >= 0.05 && gauge_gap <= 1e-9,
        format!(
            "heldout accuracy {:.3} vs majority {:.3} on {} cells; gauge gap {gauge_gap:.1e}",
            fit.heldout_accuracy, fit.majority_baseline, fit.heldout_cells
        ),
    )
}

fn wavelet_sanity() -> Outcome {
    for raised in 0..5 {
        let utterance = raised_word_utterance(raised);
        let signal = composite_signal(&utterance.audio, &utterance.spans, ComponentWeights::default()).unwrap();
        let scores = wavelet_prominence(&signal, &utterance.spans).unwrap();
        let top = (0..scores.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .unwrap();
        if top != raised {
            return Outcome::Fail(format!("raised word {raised}, top word {top}: {scores:?}"));
        }
    }
    Outcome::Pass("raised word scores highest at each of 5 positions".into())
}

fn redundancy_mechanics() -> Outcome {
    let counts: Vec<usize> = [(500, 8), (500, 4), (900, 2), (1500, 1)]
        .iter()
        .flat_map(|&(n, k)| std::iter::repeat(k).take(n))
        .collect();
    let corpus = annotated_corpus(&counts, 2, 9);
    let sets = match redundancy_training_sets(&corpus, &PAPER_BUDGETS, &BTreeSet::new(), 3) {
        Ok(sets) => sets,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    for (budget, set) in PAPER_BUDGETS.iter().zip(&sets) {
        let k = budget.annotators as f64;
        let targets: Vec<f64> = set.iter().flat_map(|e| e.targets.clone().unwrap()).collect();
        if set.len() != budget.utterances {
            return Outcome::Fail(format!("{budget:?}: {} utterances", set.len()));
        }
        if let Some(t) = targets.iter().find(|&&t| (t * k).fract() != 0.0) {
            return Outcome::Fail(format!("{budget:?}: target {t} is not a multiple of 1/{k}"));
        }
    }
    let binary = sets[3]
        .iter()
        .flat_map(|e| e.targets.clone().unwrap())
        .all(|t| t == 0.0 || t == 1.0);
    let eighths = sets[0]
        .iter()
        .flat_map(|e| e.targets.clone().unwrap())
        .any(|t| (t * 4.0).fract() != 0.0);
    verdict(
        binary && eighths,
        "(3200,1) targets binary; (400,8) targets at 1/8 resolution; all multiples of 1/k".into(),
    )
}

/// Evaluates released checkpoints when the full-scale data is configured via
/// environment variables.
fn full_scale() -> Outcome {
    let var = |name: &str| std::env::var(name).ok();
    let (Some(checkpoints), Some(buckeye), Some(buckeye_targets), Some(libritts), Some(libritts_targets)) = (
        var("PROMINENCE_FULL_CHECKPOINTS"),
        var("PROMINENCE_FULL_BUCKEYE_MANIFEST"),
        var("PROMINENCE_FULL_BUCKEYE_TARGETS"),
        var("PROMINENCE_FULL_LIBRITTS_MANIFEST"),
        var("PROMINENCE_FULL_LIBRITTS_TARGETS"),
    ) else {
        return Outcome::Skip("full-scale data not configured (PROMINENCE_FULL_* variables)".into());
    };
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(cache_dir.path(), FeatureConfig::default());
    let load = |manifest: &str, targets: &str| -> prominence::Result<_> {
        let utterances = load_corpus(&PathBuf::from(manifest))?;
        let file = std::fs::File::open(targets)?;
        let targets: HashMap<_, _> = read_targets_csv(file)?
            .into_iter()
            .map(|t| (t.utterance_id.clone(), t))
            .collect();
        build_examples(&utterances, &targets, &cache)
    };
    let run = || -> prominence::Result<(f64, f64, f64)> {
        let buckeye = load(&buckeye, &buckeye_targets)?;
        let libritts = load(&libritts, &libritts_targets)?;
        let paths: Vec<&str> = checkpoints.split(',').collect();
        let (mut pc, mut bce, mut lt) = (0.0, 0.0, 0.0);
        for path in &paths {
            let model = Checkpoint::load(&PathBuf::from(path))?.model;
            let b = evaluate(&model, &buckeye, "buckeye")?;
            pc += b.pearson;
            bce += b.bce;
            lt += evaluate(&model, &libritts, "libritts-test")?.pearson;
        }
        let n = paths.len() as f64;
        Ok((pc / n, bce / n, lt / n))
    };
    match run() {
        Ok((pc, bce, lt)) => verdict(
            (pc - 0.675).abs() <= 0.03 && (bce - 0.337).abs() <= 0.02 && (lt - 0.534).abs() <= 0.03,
            format!("Buckeye PC {pc:.3} BCE {bce:.3}; LibriTTS test PC {lt:.3}"),
        ),
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("downsampling oracle", downsampling_oracle),
        ("upsample/downsample consistency", upsample_consistency),
        ("gradient check", gradient_checks),
        ("synthetic learnability", learnability),
        ("metric oracles", metric_oracles),
        ("bot filter threshold", bot_threshold),
        ("rasch recovery", rasch_recovery),
        ("wavelet baseline sanity", wavelet_sanity),
        ("redundancy study mechanics", redundancy_mechanics),
        ("full-scale reproduction", full_scale),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let message = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {message}"))
        });
        let seconds = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {name}: {detail} [{seconds:.1}s]");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

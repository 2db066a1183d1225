mod support;

use ndarray::{s, Array2};
use prominence::corpus::WordSpan;
use prominence::loss::LossKind;
use prominence::model::{Location, Method, ModelConfig, ProminenceModel};
use prominence::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use support::*;

fn small(location: Location, method: Method) -> ModelConfig {
    ModelConfig {
        layers_per_stack: 2,
        channels: 6,
        input_channels: 5,
        ..ModelConfig::new(location, method)
    }
}

#[test]
fn one_score_per_word_for_every_config() {
    let spans = vec![
        WordSpan::new("a", 0, 4),
        WordSpan::new("b", 6, 7),
        WordSpan::new("c", 7, 12),
    ];
    let mel = Array2::from_elem((5, 14), 0.3);
    for config in all_configs() {
        let config = small(config.location, config.method);
        let model = ProminenceModel::new(config.clone(), 1).unwrap();
        let out = model.forward(mel.view(), &spans).unwrap();
        assert_eq!(out.word_scores.len(), 3, "{config:?}");
        let has_frames = matches!(config.location, Location::Framewise | Location::Posthoc);
        assert_eq!(out.frame_scores.map(|f| f.len()), has_frames.then_some(14));
    }
}

#[test]
fn input_errors() {
    let model = ProminenceModel::new(small(Location::Intermediate, Method::Sum), 0).unwrap();
    let mel = Array2::zeros((5, 10));
    assert!(matches!(model.forward(mel.view(), &[]), Err(Error::Model(_))));
    let wrong = Array2::zeros((4, 10));
    assert!(matches!(
        model.forward(wrong.view(), &[WordSpan::new("a", 0, 3)]),
        Err(Error::Config(_))
    ));
    assert!(model.forward(mel.view(), &[WordSpan::new("a", 8, 12)]).is_err());
}

#[test]
fn prehoc_encoder_is_confined_to_each_word() {
    let model = ProminenceModel::new(ModelConfig::new(Location::Prehoc, Method::Average), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spans = vec![
        WordSpan::new("a", 1, 9),
        WordSpan::new("b", 9, 15),
        WordSpan::new("c", 17, 26),
    ];
    let mel = Array2::from_shape_fn((80, 28), |_| rng.gen_range(-1.0..1.0));
    let before = model.encoder_activations(mel.view(), &spans).unwrap();
    for (j, span) in spans.iter().enumerate() {
        let mut perturbed = mel.clone();
        perturbed
            .slice_mut(s![.., span.start_frame..span.end_frame])
            .mapv_inplace(|v| v + 3.0);
        let after = model.encoder_activations(perturbed.view(), &spans).unwrap();
        for (k, other) in spans.iter().enumerate().filter(|&(k, _)| k != j) {
            let range = s![.., other.start_frame..other.end_frame];
            assert_eq!(before.slice(range), after.slice(range), "word {j} leaked into word {k}");
        }
        let own = s![.., span.start_frame..span.end_frame];
        assert_ne!(before.slice(own), after.slice(own));
    }
}

#[test]
fn frame_locations_do_see_neighbouring_words() {
    let model = ProminenceModel::new(ModelConfig::new(Location::Intermediate, Method::Average), 4).unwrap();
    let spans = vec![WordSpan::new("a", 0, 8), WordSpan::new("b", 8, 16)];
    let mel = Array2::from_elem((80, 16), 0.5);
    let mut perturbed = mel.clone();
    perturbed.slice_mut(s![.., 0..8]).fill(2.0);
    let before = model.encoder_activations(mel.view(), &spans).unwrap();
    let after = model.encoder_activations(perturbed.view(), &spans).unwrap();
    assert_ne!(before.slice(s![.., 8..10]), after.slice(s![.., 8..10]));
}

#[test]
fn constant_input_gives_equal_word_scores() {
    let model = ProminenceModel::new(ModelConfig::new(Location::Intermediate, Method::Sum), 8).unwrap();
    // Sixteen equal-length words; six layers of kernel 3 see six frames (or
    // words) to each side, so only interior positions escape padding effects.
    let spans: Vec<WordSpan> = (0..16).map(|i| WordSpan::new("w", 40 + i * 10, 48 + i * 10)).collect();
    for value in [0.0, -2.5] {
        let mel = Array2::from_elem((80, 240), value);
        let hidden = model.encoder_activations(mel.view(), &spans).unwrap();
        for t in 6..234 {
            for c in 0..80 {
                assert!((hidden[[c, t]] - hidden[[c, 120]]).abs() <= 1e-12);
            }
        }
        let scores = model.forward(mel.view(), &spans).unwrap().word_scores;
        for w in 6..10 {
            assert!((scores[w] - scores[6]).abs() <= 1e-12, "{scores}");
        }
    }
}

#[test]
fn mse_outputs_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for location in Location::ALL {
        let config = ModelConfig {
            loss: LossKind::Mse,
            ..small(location, Method::Max)
        };
        let model = ProminenceModel::new(config, 3).unwrap();
        let mel = Array2::from_shape_fn((5, 30), |_| rng.gen_range(-50.0..50.0));
        let spans = random_spans(&mut rng, 30);
        let out = model.forward(mel.view(), &spans).unwrap();
        assert!(out
            .word_scores
            .iter()
            .chain(out.frame_scores.iter().flatten())
            .all(|s| (0.0..=1.0).contains(s)));
    }
}

#[test]
fn mse_gradients_match_finite_differences() {
    for location in Location::ALL {
        let config = ModelConfig {
            loss: LossKind::Mse,
            ..small(location, Method::Average)
        };
        let report = gradient_check(config, 6, 20);
        assert!(
            report.input_error < 1e-3 && report.parameter_error < 1e-3,
            "{location}: {report:?}"
        );
    }
}

#[test]
fn small_models_pass_gradient_check_with_every_parameter_sampled() {
    for config in all_configs() {
        let config = small(config.location, config.method);
        let report = gradient_check(config.clone(), 2, 1000);
        assert!(
            report.input_error < 1e-3 && report.parameter_error < 1e-3,
            "{}+{}: {report:?}",
            config.location,
            config.method
        );
    }
}

#[test]
fn intermediate_and_posthoc_share_layer_counts() {
    let count = |l| ProminenceModel::new(ModelConfig::new(l, Method::Sum), 0).unwrap();
    let (intermediate, posthoc, prehoc, framewise) = (
        count(Location::Intermediate),
        count(Location::Posthoc),
        count(Location::Prehoc),
        count(Location::Framewise),
    );
    assert_eq!(intermediate.layer_counts().0 + intermediate.layer_counts().1, 12);
    assert_eq!(
        intermediate.layer_counts().0 + intermediate.layer_counts().1,
        posthoc.layer_counts().0 + posthoc.layer_counts().1
    );
    assert_eq!(intermediate.parameter_count(), posthoc.parameter_count());
    assert_eq!(prehoc.parameter_count(), intermediate.parameter_count());
    assert_eq!(posthoc.layer_counts().2, 12);
    assert_eq!(framewise.layer_counts().2, 12);
    assert_eq!(intermediate.layer_counts().2, 6);
}

#[test]
fn same_seed_same_weights() {
    let a = ProminenceModel::new(ModelConfig::default(), 9).unwrap();
    let b = ProminenceModel::new(ModelConfig::default(), 9).unwrap();
    let c = ProminenceModel::new(ModelConfig::default(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

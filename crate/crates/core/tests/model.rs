use cellfate::dataset::LabelTaxonomy;
use cellfate::model::checkpoint::{load_checkpoint, save_checkpoint};
use cellfate::model::{
    apply_dropout, build_model, forward, predict, predict_images, softmax, stack_batch, Activation, BackboneKind, ModelConfig,
    Prediction, Stage,
};
use cellfate::seed::stream;
use ndarray::{Array3, Array4};
use proptest::prelude::*;
use rand::Rng;

fn four() -> LabelTaxonomy {
    LabelTaxonomy::multiclass(["a", "b", "c", "d"]).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        dense1_units: 48,
        dense2_units: 24,
        ..ModelConfig::small_cnn(32, 32, 1)
    }
}

fn images(n: usize, seed: u64) -> Vec<Array3<f32>> {
    let mut rng = stream(seed);
    (0..n)
        .map(|_| Array3::from_shape_fn((32, 32, 1), |_| rng.random_range(0.0..1.0)))
        .collect()
}

#[test]
fn untouched_config_builds_the_documented_head() {
    let config = ModelConfig {
        pretrained_init: false,
        ..ModelConfig::default()
    };
    let state = build_model(&config, &four(), 0).unwrap();
    assert_eq!(
        state.architecture(),
        vec![
            Stage::Backbone(BackboneKind::Resnet50),
            Stage::GlobalAveragePooling,
            Stage::Dense {
                units: 1024,
                activation: Activation::Relu
            },
            Stage::Dropout { rate_milli: 500 },
            Stage::Dense {
                units: 512,
                activation: Activation::Relu
            },
            Stage::Dense {
                units: 4,
                activation: Activation::Softmax
            },
        ]
    );
    assert_eq!(state.feature_width(), 2048);
    assert_eq!(state.param_count(), 26_186_180);
}

#[test]
fn small_cnn_layer_ids_end_at_pooling() {
    let state = build_model(&small(), &four(), 0).unwrap();
    assert_eq!(state.layer_ids(), ["conv1", "conv2", "conv3", "gap"]);
}

#[test]
fn checkpoint_round_trip_preserves_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let state = build_model(&small(), &four(), 17).unwrap();
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, state);
    let imgs = images(6, 3);
    let batch = stack_batch(&imgs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(predict(&state, &batch).unwrap(), predict(&loaded, &batch).unwrap());
}

#[test]
fn batched_and_per_image_inference_agree() {
    let state = build_model(&small(), &four(), 2).unwrap();
    let imgs = images(5, 8);
    let batch = stack_batch(&imgs.iter().collect::<Vec<_>>()).unwrap();
    let views: Vec<_> = imgs.iter().map(|a| a.view()).collect();
    let stacked = predict(&state, &batch).unwrap();
    let separate = predict_images(&state, &views).unwrap();
    assert_eq!(stacked, separate);
    assert_eq!(separate, predict_images(&state, &views).unwrap());
}

#[test]
fn training_mode_draws_dropout_from_the_stream() {
    let state = build_model(&small(), &four(), 2).unwrap();
    let imgs = images(3, 1);
    let batch: Array4<f32> = stack_batch(&imgs.iter().collect::<Vec<_>>()).unwrap();
    let a = forward(&state, &batch, true, &mut stream(5)).unwrap();
    let b = forward(&state, &batch, true, &mut stream(5)).unwrap();
    let c = forward(&state, &batch, true, &mut stream(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.logits, c.logits);
}

#[test]
fn prediction_examples() {
    let from_probs = |p: &[f64]| Prediction::from_logits(&p.iter().map(|v| v.ln()).collect::<Vec<_>>());
    assert_eq!(from_probs(&[0.1, 0.7, 0.1, 0.1]).predicted_index, 1);
    assert_eq!(from_probs(&[0.5, 0.5]).predicted_index, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_shift_invariant(logits in proptest::collection::vec(-30.0f64..30.0, 2..8), shift in -500.0f64..500.0) {
        let moved: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let a = Prediction::from_logits(&logits);
        let b = Prediction::from_logits(&moved);
        for (p, q) in a.probabilities.iter().zip(&b.probabilities) {
            prop_assert!((p - q).abs() < 1e-6);
        }
        prop_assert_eq!(a.predicted_index, b.predicted_index);
    }

    #[test]
    fn softmax_rows_are_distributions(logits in proptest::collection::vec(-1000.0f64..1000.0, 1..10)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dropout_preserves_the_expectation(
        x in proptest::collection::vec(prop_oneof![-4.0f32..-0.1, 0.1f32..4.0], 16..96),
        rate in 0.05f32..0.6,
        seed in any::<u64>(),
    ) {
        let mut rng = stream(seed);
        let passes = 10_000;
        let mut sum = vec![0.0f64; x.len()];
        for _ in 0..passes {
            for (s, v) in sum.iter_mut().zip(apply_dropout(&x, rate, &mut rng)) {
                *s += f64::from(v);
            }
        }
        let err: f64 = sum.iter().zip(&x).map(|(s, v)| (s / passes as f64 - f64::from(*v)).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = x.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err / norm < 0.02, "relative error {}", err / norm);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn network_outputs_are_distributions(seed in any::<u64>()) {
        let state = build_model(&small(), &four(), seed).unwrap();
        let imgs = images(4, seed ^ 1);
        let batch = stack_batch(&imgs.iter().collect::<Vec<_>>()).unwrap();
        for mode in [false, true] {
            let out = forward(&state, &batch, mode, &mut stream(seed)).unwrap();
            for row in out.probabilities.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}

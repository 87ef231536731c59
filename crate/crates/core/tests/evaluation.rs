use std::fs;
use std::path::Path;

use cellfate::dataset::{split_dataset, DatasetManifest, LabelTaxonomy, PreprocessSpec, Split, SplitFractions};
use cellfate::evaluation::{
    compute_accuracy, compute_confusion_matrix, compute_roc_curve, evaluate, one_vs_rest_auc, read_roc_points, render_figures,
    CONFUSION_CSV, CONFUSION_FIGURE, ROC_FIGURE, ROC_POINTS,
};
use cellfate::model::{build_model, ModelConfig, NetworkState};
use cellfate::synth::{generate_dataset, Archetype, Difficulty, SyntheticSpec};
use cellfate::Error;
use ndarray::Array2;
use proptest::prelude::*;

/// Instance and areas printed by `tests/oracles/auc_oracle.py`.
const ORACLE_WEIGHTS: [[u32; 4]; 20] = [
    [4, 2, 5, 3],
    [2, 4, 3, 5],
    [2, 4, 3, 4],
    [5, 5, 2, 3],
    [5, 3, 5, 1],
    [2, 4, 2, 5],
    [2, 4, 1, 3],
    [4, 4, 1, 2],
    [3, 4, 3, 3],
    [2, 3, 4, 4],
    [3, 5, 2, 4],
    [2, 2, 1, 2],
    [1, 3, 5, 3],
    [5, 4, 5, 1],
    [3, 5, 2, 2],
    [4, 3, 2, 2],
    [3, 4, 5, 2],
    [3, 4, 5, 3],
    [3, 4, 2, 2],
    [3, 2, 5, 1],
];
const ORACLE_TRUTHS: [usize; 20] = [1, 2, 2, 2, 0, 3, 0, 1, 0, 3, 1, 1, 2, 3, 3, 2, 0, 0, 1, 3];
const ORACLE_AUCS: [f64; 4] = [0.46, 0.6266666666666667, 0.49333333333333335, 0.42];

fn names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class{c}")).collect()
}

#[test]
fn one_vs_rest_matches_the_pairwise_oracle() {
    let probs = Array2::from_shape_fn((20, 4), |(i, j)| {
        let row = ORACLE_WEIGHTS[i];
        f64::from(row[j]) / f64::from(row.iter().sum::<u32>())
    });
    let ovr = one_vs_rest_auc(&probs, &ORACLE_TRUTHS, &names(4)).unwrap();
    for (got, want) in ovr.per_class_auc.values().zip(ORACLE_AUCS) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    assert!((ovr.macro_auc - 0.5).abs() < 1e-9);
}

fn pairwise_auc(scores: &[f64], truths: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, _) in scores.iter().zip(truths).filter(|(_, t)| **t) {
        for (b, _) in scores.iter().zip(truths).filter(|(_, t)| !**t) {
            total += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Scores on a coarse grid so that ties are frequent, with both classes present.
fn binary_instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=30).prop_flat_map(|n| {
        (
            proptest::collection::vec(0u8..12, n),
            proptest::collection::vec(any::<bool>(), n - 2),
        )
            .prop_map(|(grid, mut truths)| {
                truths.push(true);
                truths.push(false);
                (grid.into_iter().map(|g| f64::from(g) / 11.0).collect(), truths)
            })
    })
}

fn multiclass_instance() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, usize)> {
    (2usize..=5, 0usize..=20).prop_flat_map(|(k, extra)| {
        let n = k + extra;
        (
            proptest::collection::vec(1u32..6, n * k),
            proptest::collection::vec(0..k, extra),
            Just(k),
        )
            .prop_map(move |(weights, tail, k)| {
                let probs = Array2::from_shape_fn((n, k), |(i, j)| {
                    let row = &weights[i * k..(i + 1) * k];
                    f64::from(row[j]) / f64::from(row.iter().sum::<u32>())
                });
                let truths: Vec<usize> = (0..k).chain(tail).collect();
                (probs, truths, k)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn trapezoid_equals_pairwise_statistic((scores, truths) in binary_instance()) {
        let roc = compute_roc_curve(&scores, &truths).unwrap();
        prop_assert!((roc.auc - pairwise_auc(&scores, &truths)).abs() < 1e-9);
    }

    #[test]
    fn curves_run_monotonically_between_fixed_endpoints((scores, truths) in binary_instance()) {
        let roc = compute_roc_curve(&scores, &truths).unwrap();
        prop_assert_eq!((roc.fpr[0], roc.tpr[0]), (0.0, 0.0));
        prop_assert_eq!((*roc.fpr.last().unwrap(), *roc.tpr.last().unwrap()), (1.0, 1.0));
        prop_assert!(roc.fpr.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(roc.tpr.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(roc.thresholds.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn strictly_increasing_transforms_keep_the_curve((scores, truths) in binary_instance(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let moved: Vec<f64> = scores.iter().map(|s| (a * s).exp() + b).collect();
        let before = compute_roc_curve(&scores, &truths).unwrap();
        let after = compute_roc_curve(&moved, &truths).unwrap();
        prop_assert_eq!(before.fpr.len(), after.fpr.len());
        for i in 0..before.fpr.len() {
            prop_assert!((before.fpr[i] - after.fpr[i]).abs() < 1e-12);
            prop_assert!((before.tpr[i] - after.tpr[i]).abs() < 1e-12);
        }
        prop_assert!((before.auc - after.auc).abs() < 1e-12);
    }

    #[test]
    fn confusion_total_and_trace((probs, truths, k) in multiclass_instance()) {
        let preds: Vec<usize> = probs.rows().into_iter().map(|r| cellfate::model::argmax(r.as_slice().unwrap())).collect();
        let cm = compute_confusion_matrix(&preds, &truths, k).unwrap();
        prop_assert_eq!(cm.total(), truths.len() as u64);
        prop_assert_eq!(compute_accuracy(&preds, &truths).unwrap(), cm.trace() as f64 / truths.len() as f64);
    }

    #[test]
    fn permuting_classes_permutes_the_results((probs, truths, k) in multiclass_instance(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut cellfate::seed::stream(seed));
        // Class c of the original order becomes class perm[c].
        let class_names = names(k);
        let mut permuted_names = vec![String::new(); k];
        let mut permuted = Array2::zeros(probs.dim());
        for (c, &to) in perm.iter().enumerate() {
            permuted_names[to] = class_names[c].clone();
            permuted.column_mut(to).assign(&probs.column(c));
        }
        let permuted_truths: Vec<usize> = truths.iter().map(|&t| perm[t]).collect();

        let a = one_vs_rest_auc(&probs, &truths, &class_names).unwrap();
        let b = one_vs_rest_auc(&permuted, &permuted_truths, &permuted_names).unwrap();
        for (name, auc) in &a.per_class_auc {
            prop_assert_eq!(*auc, b.per_class_auc[name]);
        }
        prop_assert_eq!(b.per_class_auc.keys().collect::<Vec<_>>(), permuted_names.iter().collect::<Vec<_>>());

        // Predictions fixed in the original labelling, relabelled alongside.
        let preds: Vec<usize> = truths.iter().map(|&t| (t + 1) % k).collect();
        let permuted_preds: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let ca = compute_confusion_matrix(&preds, &truths, k).unwrap();
        let cb = compute_confusion_matrix(&permuted_preds, &permuted_truths, k).unwrap();
        for t in 0..k {
            for p in 0..k {
                prop_assert_eq!(ca.counts[t][p], cb.counts[perm[t]][perm[p]]);
            }
        }
    }
}

fn pipeline(dir: &Path, archetypes: Vec<Archetype>, taxonomy: LabelTaxonomy) -> (DatasetManifest, NetworkState, PreprocessSpec) {
    let spec = SyntheticSpec {
        taxonomy,
        archetypes,
        per_class_count: 10,
        image_size: 32,
        seed: 5,
        difficulty: Difficulty::Easy,
    };
    let generated = generate_dataset(&spec, dir).unwrap();
    let manifest = split_dataset(&generated.manifest, SplitFractions::default(), 1).unwrap();
    let config = ModelConfig {
        dense1_units: 32,
        dense2_units: 16,
        ..ModelConfig::small_cnn(32, 32, 1)
    };
    let state = build_model(&config, &manifest.taxonomy, 8).unwrap();
    (manifest, state, PreprocessSpec::unit_interval(32, 32, 1))
}

fn four_class(dir: &Path) -> (DatasetManifest, NetworkState, PreprocessSpec) {
    let names: Vec<&str> = Archetype::ALL.iter().map(|a| a.as_str()).collect();
    pipeline(dir, Archetype::ALL.to_vec(), LabelTaxonomy::multiclass(names).unwrap())
}

#[test]
fn evaluation_is_repeatable_and_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (m, state, pre) = four_class(&dir.path().join("data"));
    let a = evaluate(&state, &m, Split::Test, &pre).unwrap();
    let b = evaluate(&state, &m, Split::Test, &pre).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());

    let cm = a.report.confusion_matrix();
    assert_eq!(cm.total(), a.report.n as u64);
    assert_eq!(a.report.accuracy, cm.trace() as f64 / a.report.n as f64);
    let expected_ids: Vec<&str> = m.samples_in(Split::Test).map(|s| s.id.as_str()).collect();
    assert_eq!(a.sample_ids, expected_ids);

    let path = dir.path().join("report.json");
    a.report.write(&path).unwrap();
    assert_eq!(cellfate::evaluation::EvalReport::read(&path).unwrap(), a.report);
}

#[test]
fn four_class_figures_have_a_curve_per_class_and_replot_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (m, state, pre) = four_class(&dir.path().join("data"));
    let eval = evaluate(&state, &m, Split::Test, &pre).unwrap();
    let out = dir.path().join("figures");
    render_figures(&eval.report, &eval.curves, &out).unwrap();
    for f in [ROC_FIGURE, CONFUSION_FIGURE] {
        assert!(image::open(out.join(f)).is_ok(), "{f}");
    }
    let points = read_roc_points(&out.join(ROC_POINTS)).unwrap();
    assert_eq!(
        points.keys().collect::<Vec<_>>(),
        eval.report.class_names.iter().collect::<Vec<_>>()
    );
    for curve in &eval.curves {
        let replot: Vec<(f64, f64, f64)> = curve
            .thresholds
            .iter()
            .zip(&curve.fpr)
            .zip(&curve.tpr)
            .map(|((t, f), p)| (*t, *f, *p))
            .collect();
        assert_eq!(points[&curve.positive_class], replot);
    }
}

#[test]
fn binary_reports_have_four_confusion_cells_and_a_positive_auc() {
    let dir = tempfile::tempdir().unwrap();
    let taxonomy = LabelTaxonomy::binary("nsc_like", "neuron_like").unwrap();
    let (m, state, pre) = pipeline(
        &dir.path().join("data"),
        vec![Archetype::NscLike, Archetype::NeuronLike],
        taxonomy,
    );
    let eval = evaluate(&state, &m, Split::Test, &pre).unwrap();
    assert_eq!(eval.report.positive_class_auc, Some(eval.report.per_class_auc["neuron_like"]));
    let out = dir.path().join("figures");
    render_figures(&eval.report, &eval.curves, &out).unwrap();
    let text = fs::read_to_string(out.join(CONFUSION_CSV)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("true,pred,count"));
    let cells: Vec<u64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(cells.len(), 4);
    assert_eq!(cells.iter().sum::<u64>(), eval.report.n as u64);
}

#[test]
fn empty_split_and_foreign_taxonomy_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, state, pre) = four_class(&dir.path().join("data"));
    let binary = build_model(&state.config, &LabelTaxonomy::binary("a", "b").unwrap(), 0).unwrap();
    assert!(matches!(
        evaluate(&binary, &m, Split::Test, &pre),
        Err(Error::Compatibility(_))
    ));
    m.samples.iter_mut().for_each(|s| s.split = Split::Train);
    assert!(matches!(evaluate(&state, &m, Split::Test, &pre), Err(Error::Split(_))));
}

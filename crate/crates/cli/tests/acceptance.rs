//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cellfate::dataset::{load_images, load_manifest, split_dataset, DatasetManifest, LabelTaxonomy, PreprocessSpec, Split};
use cellfate::evaluation::{
    compute_accuracy, compute_confusion_matrix, compute_roc_curve, one_vs_rest_auc, read_roc_points, trapezoid, EvalReport,
    RocCurve, ROC_POINTS,
};
use cellfate::interpretability::{capture_with_prediction, foreground_contrast, heat_layer, reduce, Reduction};
use cellfate::model::checkpoint::{load_checkpoint_for, save_backbone_weights};
use cellfate::model::{build_model, predict_images, Activation, BackboneKind, ModelConfig, Stage};
use cellfate::synth::{generate_dataset, Difficulty, MaskLabel, SyntheticSpec};
use cellfate::training::{gradient_check, score_images, HeadLayer};
use cellfate_cli::config::desk_scale;
use cellfate_cli::record::RunRecord;
use cellfate_cli::{write_config, RunConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Pipeline runs shared by several criteria.

const EASY_SEED: u64 = 11;
const HARD_SEED: u64 = 5;

struct PipelineRun {
    out: PathBuf,
    config: RunConfig,
    elapsed: Duration,
}

impl PipelineRun {
    fn report(&self) -> Result<EvalReport, String> {
        EvalReport::read(&self.out.join("eval/report.json")).map_err(fail)
    }

    fn record(&self, command: &str) -> Result<RunRecord, String> {
        RunRecord::read(&self.out.join("records").join(format!("{command}.json"))).map_err(fail)
    }

    fn manifest(&self) -> Result<DatasetManifest, String> {
        let scanned = load_manifest(&self.config.data_dir(&self.out), &self.config.taxonomy).map_err(fail)?;
        split_dataset(&scanned, self.config.dataset.split, self.config.split_seed()).map_err(fail)
    }
}

fn cellfate(args: &[&str], config: &Path, out: &Path, workers: usize) -> Result<(), String> {
    let output = Command::new(env!("CARGO_BIN_EXE_cellfate"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--workers")
        .arg(workers.to_string())
        .env("RUST_LOG", "warn")
        .output()
        .map_err(fail)?;
    ensure!(
        output.status.success(),
        "`cellfate {}` exited with {}: {}",
        args.join(" "),
        output.status,
        String::from_utf8_lossy(&output.stderr).trim()
    );
    Ok(())
}

fn run_pipeline(config: RunConfig, out: PathBuf, workers: usize) -> Result<PipelineRun, String> {
    let config_path = write_config(&config, &out).map_err(fail)?;
    let start = Instant::now();
    for command in ["generate", "train", "evaluate"] {
        cellfate(&[command], &config_path, &out, workers)?;
    }
    Ok(PipelineRun {
        out,
        config,
        elapsed: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// Oracles.

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random classification instance in which every class is present, with
/// scores quantized so ties occur.
fn random_instance(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>, Vec<String>) {
    let k = rng.random_range(2..=5);
    let n = rng.random_range(2 * k..=30);
    let levels = [4.0, 10.0, 1000.0, 1e9][rng.random_range(0..4)];
    let mut truths: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    for i in (1..n).rev() {
        truths.swap(i, rng.random_range(0..=i));
    }
    let mut probs = Array2::<f64>::zeros((n, k));
    for mut row in probs.rows_mut() {
        let raw: Vec<f64> = (0..k).map(|_| (rng.random::<f64>() * levels).round() + 1.0).collect();
        let total: f64 = raw.iter().sum();
        row.iter_mut().zip(raw).for_each(|(d, v)| *d = v / total);
    }
    let names = (0..k).map(|c| format!("class_{c}")).collect();
    (probs, truths, names)
}

fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > r[best] { i } else { best })
        })
        .collect()
}

fn check_roc_structure(curve: &RocCurve) -> Result<(), String> {
    let name = &curve.positive_class;
    let len = curve.thresholds.len();
    ensure!(
        len >= 2 && curve.fpr.len() == len && curve.tpr.len() == len,
        "{name}: ragged curve"
    );
    ensure!(
        curve.thresholds[0] == f64::INFINITY,
        "{name}: first threshold is {}",
        curve.thresholds[0]
    );
    ensure!(
        curve.fpr[0] == 0.0 && curve.tpr[0] == 0.0,
        "{name}: curve does not start at (0, 0)"
    );
    ensure!(
        curve.fpr[len - 1] == 1.0 && curve.tpr[len - 1] == 1.0,
        "{name}: curve does not end at (1, 1)"
    );
    for i in 1..len {
        ensure!(
            curve.thresholds[i] < curve.thresholds[i - 1],
            "{name}: thresholds not strictly descending at {i}"
        );
        ensure!(
            curve.fpr[i] >= curve.fpr[i - 1] && curve.tpr[i] >= curve.tpr[i - 1],
            "{name}: curve not monotone at {i}"
        );
        ensure!(
            curve.fpr[i] > curve.fpr[i - 1] || curve.tpr[i] > curve.tpr[i - 1],
            "{name}: repeated point at {i}"
        );
    }
    ensure!((0.0..=1.0).contains(&curve.auc), "{name}: AUC {} outside [0, 1]", curve.auc);
    ensure!(
        curve.auc == trapezoid(&curve.fpr, &curve.tpr),
        "{name}: AUC differs from the area under its points"
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Criteria.

fn auc_matches_pairwise_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances = 1200;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (probs, truths, names) = random_instance(&mut rng);
        let ovr = one_vs_rest_auc(&probs, &truths, &names).map_err(fail)?;
        let mut oracle_macro = 0.0;
        for (c, name) in names.iter().enumerate() {
            let scores = probs.column(c).to_vec();
            let positive: Vec<bool> = truths.iter().map(|&t| t == c).collect();
            let expected = pairwise_auc(&scores, &positive);
            oracle_macro += expected / names.len() as f64;
            worst = worst.max((ovr.per_class_auc[name] - expected).abs());
        }
        worst = worst.max((ovr.macro_auc - oracle_macro).abs());
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-9, "max deviation {worst:e} exceeds 1e-9");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{instances} instances, max |diff| {worst:.1e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn roc_curves_are_well_formed(easy: &PipelineRun) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut curves = 0;
    for _ in 0..500 {
        let (probs, truths, names) = random_instance(&mut rng);
        for curve in one_vs_rest_auc(&probs, &truths, &names).map_err(fail)?.curves {
            check_roc_structure(&curve)?;
            curves += 1;
        }
    }
    // Strictly increasing transforms keep the ROC point set and the area.
    let mut transformed = 0;
    for _ in 0..500 {
        let (probs, truths, names) = random_instance(&mut rng);
        for c in 0..names.len() {
            let scores = probs.column(c).to_vec();
            let positive: Vec<bool> = truths.iter().map(|&t| t == c).collect();
            let base = compute_roc_curve(&scores, &positive).map_err(fail)?;
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s.powi(3) - 7.0).collect();
            let other = compute_roc_curve(&warped, &positive).map_err(fail)?;
            ensure!(base.fpr == other.fpr && base.tpr == other.tpr, "transform moved ROC points");
            ensure!(
                (base.auc - other.auc).abs() <= 1e-12,
                "transform changed AUC by {:e}",
                base.auc - other.auc
            );
            transformed += 1;
        }
    }
    // All-tied scores give exactly one half, whatever the labels.
    for _ in 0..200 {
        let n = rng.random_range(2..=30);
        let mut truths: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        truths[0] = true;
        truths[1] = false;
        let tied = vec![rng.random::<f64>(); n];
        let auc = compute_roc_curve(&tied, &truths).map_err(fail)?.auc;
        ensure!(auc == 0.5, "all-tied AUC {auc}");
    }
    // A perfect and a reversed ranking pin the extremes.
    let truths = [false, false, true, true];
    ensure!(
        compute_roc_curve(&[0.1, 0.2, 0.8, 0.9], &truths).map_err(fail)?.auc == 1.0,
        "perfect ranking"
    );
    ensure!(
        compute_roc_curve(&[0.9, 0.8, 0.2, 0.1], &truths).map_err(fail)?.auc == 0.0,
        "reversed ranking"
    );
    ensure!(
        compute_roc_curve(&[0.5; 4], &truths).map_err(fail)?.auc == 0.5,
        "all-tied scores"
    );

    let points = read_roc_points(&easy.out.join("eval").join(ROC_POINTS)).map_err(fail)?;
    let report = easy.report()?;
    for (class, rows) in &points {
        let curve = RocCurve {
            thresholds: rows.iter().map(|r| r.0).collect(),
            fpr: rows.iter().map(|r| r.1).collect(),
            tpr: rows.iter().map(|r| r.2).collect(),
            auc: trapezoid(
                &rows.iter().map(|r| r.1).collect::<Vec<_>>(),
                &rows.iter().map(|r| r.2).collect::<Vec<_>>(),
            ),
            positive_class: class.clone(),
        };
        check_roc_structure(&curve)?;
        let reported = report
            .per_class_auc
            .get(class)
            .ok_or(format!("{class} missing from report"))?;
        ensure!(
            (curve.auc - reported).abs() < 1e-12,
            "{class}: plotted area {} vs reported {reported}",
            curve.auc
        );
        curves += 1;
    }
    Ok(format!(
        "{curves} curves checked ({} from the pipeline run), {transformed} transform pairs, 200 all-tied instances",
        points.len()
    ))
}

fn accuracy_is_confusion_trace(runs: &[&PipelineRun]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (probs, truths, names) = random_instance(&mut rng);
        let predictions = argmax_rows(&probs);
        let cm = compute_confusion_matrix(&predictions, &truths, names.len()).map_err(fail)?;
        let accuracy = compute_accuracy(&predictions, &truths).map_err(fail)?;
        ensure!(
            cm.total() == truths.len() as u64,
            "confusion total {} for {} samples",
            cm.total(),
            truths.len()
        );
        ensure!(
            accuracy == cm.trace() as f64 / truths.len() as f64,
            "accuracy {accuracy} is not trace / N"
        );
    }
    for run in runs {
        let report = run.report()?;
        let cm = report.confusion_matrix();
        ensure!(
            cm.total() == report.n as u64,
            "{}: confusion total {} vs n {}",
            run.config.run_label,
            cm.total(),
            report.n
        );
        ensure!(
            report.accuracy == cm.trace() as f64 / report.n as f64,
            "{}: reported accuracy {} vs trace/N {}",
            run.config.run_label,
            report.accuracy,
            cm.trace() as f64 / report.n as f64
        );
        let test = run.manifest()?.samples_in(Split::Test).count();
        ensure!(
            report.n == test,
            "{}: report covers {} of {test} test samples",
            run.config.run_label,
            report.n
        );
    }
    Ok(format!("1000 random instances and {} pipeline reports", runs.len()))
}

fn default_architecture_matches() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let taxonomy =
        LabelTaxonomy::multiclass(["nsc_like", "neuron_like", "astrocyte_like", "oligodendrocyte_like"]).map_err(fail)?;

    // Stand-in for the pinned pretrained artifact: a seeded ResNet50 backbone
    // written in the weight-file format.
    let source_config = ModelConfig {
        pretrained_init: false,
        ..ModelConfig::default()
    };
    let source = build_model(&source_config, &taxonomy, 99).map_err(fail)?;
    let artifact = dir.path().join("resnet50_imagenet.cfw");
    let digest = save_backbone_weights(&source, &artifact).map_err(fail)?;

    let config = ModelConfig {
        pretrained_weights: Some(artifact),
        pretrained_sha256: Some(digest),
        ..ModelConfig::default()
    };
    ensure!(
        config.backbone == BackboneKind::Resnet50,
        "default backbone is {:?}",
        config.backbone
    );
    ensure!(
        config.pretrained_init && config.backbone_frozen,
        "defaults must request frozen pretrained weights"
    );
    ensure!(config.input_shape == [224, 224, 3], "default input {:?}", config.input_shape);
    let state = build_model(&config, &taxonomy, 7).map_err(fail)?;

    let expected = vec![
        Stage::Backbone(BackboneKind::Resnet50),
        Stage::GlobalAveragePooling,
        Stage::Dense {
            units: 1024,
            activation: Activation::Relu,
        },
        Stage::Dropout { rate_milli: 500 },
        Stage::Dense {
            units: 512,
            activation: Activation::Relu,
        },
        Stage::Dense {
            units: 4,
            activation: Activation::Softmax,
        },
    ];
    ensure!(state.architecture() == expected, "architecture {:?}", state.architecture());
    let shapes: Vec<Vec<usize>> = state.head.layers().iter().map(|d| d.weight.shape.clone()).collect();
    ensure!(
        shapes == vec![vec![2048, 1024], vec![1024, 512], vec![512, 4]],
        "dense weight shapes {shapes:?}"
    );
    let loaded = state
        .backbone
        .params()
        .into_iter()
        .zip(source.backbone.params())
        .all(|(a, b)| a.value == b.value);
    ensure!(loaded, "backbone weights differ from the pinned artifact");
    ensure!(
        state.backbone.params().iter().all(|p| !p.trainable),
        "frozen backbone has trainable tensors"
    );
    ensure!(
        state.head.layers().iter().all(|d| d.weight.trainable && d.bias.trainable),
        "head is not trainable"
    );

    let image = ndarray::Array3::<f32>::from_shape_fn((224, 224, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 255) as f32 / 255.0);
    let prediction = predict_images(&state, &[image.view()]).map_err(fail)?.remove(0);
    let sum: f64 = prediction.probabilities.iter().sum();
    ensure!(
        prediction.probabilities.len() == 4 && (sum - 1.0).abs() < 1e-9,
        "output {:?}",
        prediction.probabilities
    );
    Ok(format!(
        "resnet50 + dense(1024) + dropout(0.5) + dense(512) + dense(4); {} parameters",
        state.param_count()
    ))
}

fn head_gradients_and_initial_loss() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let spec = SyntheticSpec::four_class(24, 64, 3, Difficulty::Easy);
    let generated = generate_dataset(&spec, dir.path()).map_err(fail)?;
    let manifest = &generated.manifest;
    let preprocess = PreprocessSpec::unit_interval(64, 64, 1);
    let samples: Vec<_> = manifest.samples.iter().collect();
    let images = load_images(manifest, &samples, &preprocess).map_err(fail)?;
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label_index).collect();
    let state = build_model(&ModelConfig::small_cnn(64, 64, 1), &manifest.taxonomy, 17).map_err(fail)?;

    let mut worst = 0.0f64;
    let batch: Vec<_> = (0..8).map(|i| views[i * 12]).collect();
    let batch_labels: Vec<usize> = (0..8).map(|i| labels[i * 12]).collect();
    for layer in HeadLayer::ALL {
        let check = gradient_check(&state, &batch, &batch_labels, layer, 1e-4).map_err(fail)?;
        ensure!(check.checked > 0, "{layer:?}: no coordinates compared");
        ensure!(
            check.max_relative_error < 1e-4,
            "{layer:?}: relative error {:.2e}",
            check.max_relative_error
        );
        worst = worst.max(check.max_relative_error);
    }

    for p in predict_images(&state, &views).map_err(fail)? {
        let sum: f64 = p.probabilities.iter().sum();
        ensure!((sum - 1.0).abs() < 1e-9, "softmax row sums to {sum}");
    }

    let (loss, _) = score_images(&state, &views, &labels).map_err(fail)?;
    let ln_k = (state.class_count() as f64).ln();
    let deviation = (loss - ln_k).abs() / ln_k;
    ensure!(
        deviation <= 0.15,
        "initial loss {loss:.4} is {:.1}% from ln K = {ln_k:.4}",
        deviation * 100.0
    );
    Ok(format!(
        "max relative gradient error {worst:.1e}; initial loss {loss:.4} vs ln 4 = {ln_k:.4}"
    ))
}

fn desk_scale_targets(easy: &PipelineRun, hard: &PipelineRun) -> Outcome {
    let e = easy.report()?;
    ensure!(e.accuracy >= 0.95, "easy accuracy {:.4} < 0.95", e.accuracy);
    ensure!(e.macro_auc >= 0.99, "easy macro AUC {:.4} < 0.99", e.macro_auc);
    ensure!(easy.elapsed <= Duration::from_secs(600), "easy run took {:?}", easy.elapsed);
    let h = hard.report()?;
    ensure!(h.accuracy >= 0.80, "hard accuracy {:.4} < 0.80", h.accuracy);
    let off = h.confusion_matrix().off_diagonal();
    ensure!(off > 0, "hard confusion matrix has no off-diagonal entries");
    Ok(format!(
        "easy acc {:.3} AUC {:.4} in {:.0}s; hard acc {:.3} AUC {:.4} with {off} misclassified",
        e.accuracy,
        e.macro_auc,
        easy.elapsed.as_secs_f64(),
        h.accuracy,
        h.macro_auc
    ))
}

fn reruns_are_identical(first: &PipelineRun, second: &PipelineRun) -> Outcome {
    let mut compared = 0;
    for command in ["generate", "train", "evaluate"] {
        let a = first.record(command)?;
        let b = second.record(command)?;
        ensure!(a.config_checksum == b.config_checksum, "{command}: config checksums differ");
        ensure!(
            a.artifacts.len() == b.artifacts.len(),
            "{command}: artifact lists differ in length"
        );
        for (x, y) in a.artifacts.iter().zip(&b.artifacts) {
            ensure!(x.path == y.path, "{command}: {} vs {}", x.path, y.path);
            ensure!(x.checksum == y.checksum, "{command}: {} differs between runs", x.path);
            compared += 1;
        }
    }
    Ok(format!("{compared} artifacts identical across 4-worker and 1-worker runs"))
}

fn heat_concentrates_on_cells(easy: &PipelineRun) -> Outcome {
    let config = &easy.config;
    let manifest = easy.manifest()?;
    let spec = config.synthetic_spec().map_err(fail)?;
    let state = load_checkpoint_for(&easy.out.join("checkpoints/best.ckpt"), &config.taxonomy).map_err(fail)?;
    let layer = state.layer_ids()[state.layer_ids().len() - 2].clone();
    let test: Vec<_> = manifest.samples_in(Split::Test).collect();
    let images = load_images(&manifest, &test, &config.preprocess).map_err(fail)?;
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    let plain = predict_images(&state, &views).map_err(fail)?;
    let size = config.preprocess.target_height;

    let mut hotter = 0;
    for ((sample, image), expected) in test.iter().zip(&views).zip(&plain) {
        let (observed, mut traces) = capture_with_prediction(&state, *image, &sample.id, &[layer.as_str()]).map_err(fail)?;
        ensure!(
            observed.scores_raw == expected.scores_raw && observed.probabilities == expected.probabilities,
            "{}: capturing activations changed the output",
            sample.id
        );
        let (_, cell) = spec.render(sample.label_index, spec.image_seed(&sample.id)).map_err(fail)?;
        let foreground: Vec<bool> = cell.mask.iter().map(|m| *m != MaskLabel::Background).collect();
        let heat = heat_layer(&reduce(&traces.remove(0), Reduction::ChannelMean).map_err(fail)?, size, size);
        let (fg, bg) = foreground_contrast(&heat, &foreground).ok_or(format!("{}: empty mask region", sample.id))?;
        if fg > bg {
            hotter += 1;
        }
    }
    let share = hotter as f64 / test.len() as f64;
    ensure!(share >= 0.9, "foreground hotter on {hotter}/{} test images", test.len());

    // The command-line path produces the overlays and summaries.
    let config_path = easy.out.join("config.toml");
    cellfate(
        &[
            "visualize",
            "--sample",
            &test[0].id,
            "--per-class-summary",
            "--samples-per-class",
            "3",
        ],
        &config_path,
        &easy.out,
        2,
    )?;
    let record = easy.record("visualize")?;
    ensure!(
        record.artifacts.len() >= 3,
        "visualize recorded {} artifacts",
        record.artifacts.len()
    );
    for a in &record.artifacts {
        ensure!(easy.out.join(&a.path).is_file(), "missing {}", a.path);
    }
    Ok(format!(
        "foreground hotter on {hotter}/{} test images at `{layer}`; hooked outputs bit-identical",
        test.len()
    ))
}

// ---------------------------------------------------------------------------

fn report(index: usize, name: &str, outcome: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(outcome)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS [{index}/8] {name}: {detail} ({secs:.1}s)"),
        Err(why) => println!("FAIL [{index}/8] {name}: {why} ({secs:.1}s)"),
    }
    result.is_ok()
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let runs = (|| -> Result<[PipelineRun; 3], String> {
        let easy = run_pipeline(desk_scale("easy", Difficulty::Easy, EASY_SEED), root.path().join("easy"), 4)?;
        let hard = run_pipeline(desk_scale("hard", Difficulty::Hard, HARD_SEED), root.path().join("hard"), 4)?;
        let rerun = run_pipeline(
            desk_scale("easy", Difficulty::Easy, EASY_SEED),
            root.path().join("easy_rerun"),
            1,
        )?;
        Ok([easy, hard, rerun])
    })();

    let mut passed = Vec::new();
    passed.push(report(
        1,
        "one-vs-rest AUC agrees with the pairwise oracle",
        auc_matches_pairwise_oracle,
    ));
    match &runs {
        Ok([easy, hard, rerun]) => {
            passed.push(report(2, "ROC curves are well formed", || roc_curves_are_well_formed(easy)));
            passed.push(report(3, "accuracy equals confusion trace over N", || {
                accuracy_is_confusion_trace(&[easy, hard])
            }));
            passed.push(report(
                4,
                "default network matches the documented architecture",
                default_architecture_matches,
            ));
            passed.push(report(
                5,
                "head gradients, softmax rows and initial loss",
                head_gradients_and_initial_loss,
            ));
            passed.push(report(6, "desk-scale accuracy targets", || desk_scale_targets(easy, hard)));
            passed.push(report(7, "reruns reproduce every artifact", || {
                reruns_are_identical(easy, rerun)
            }));
            passed.push(report(8, "activation heat concentrates on cells", || {
                heat_concentrates_on_cells(easy)
            }));
        }
        Err(why) => {
            passed.push(report(
                4,
                "default network matches the documented architecture",
                default_architecture_matches,
            ));
            passed.push(report(
                5,
                "head gradients, softmax rows and initial loss",
                head_gradients_and_initial_loss,
            ));
            for (i, name) in [
                (2, "ROC curves are well formed"),
                (3, "accuracy equals confusion trace over N"),
                (6, "desk-scale accuracy targets"),
                (7, "reruns reproduce every artifact"),
                (8, "activation heat concentrates on cells"),
            ] {
                passed.push(report(i, name, || Err(format!("pipeline run failed: {why}"))));
            }
        }
    }
    let failures = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failures} failed", passed.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}

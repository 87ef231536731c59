//! Classification metrics: accuracy, confusion matrices, one-vs-rest ROC
//! curves with trapezoidal AUC, report assembly and figures.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_images, DatasetManifest, PreprocessSpec, Split};
use crate::error::{Error, Result};
use crate::model::{predict_images, NetworkState, Prediction};
use crate::raster::{heat_color, Canvas, BLACK, GRAY, PALETTE, WHITE};
use crate::seed::sha256_hex;

/// Fraction of positions where `predictions` and `truths` agree.
pub fn compute_accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Shape("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truths.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`, computed exactly as [`compute_accuracy`] does.
    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    pub fn off_diagonal(&self) -> u64 {
        self.total() - self.trace()
    }
}

/// Confusion matrix with classes named by index.
pub fn compute_confusion_matrix(predictions: &[usize], truths: &[usize], class_count: usize) -> Result<ConfusionMatrix> {
    let names = (0..class_count).map(|i| i.to_string()).collect();
    confusion_matrix_named(predictions, truths, names)
}

pub fn confusion_matrix_named(predictions: &[usize], truths: &[usize], class_names: Vec<String>) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let k = class_names.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in predictions.iter().zip(truths) {
        if let Some(&bad) = [t, p].iter().find(|&&i| i >= k) {
            return Err(Error::LabelRange {
                index: bad,
                class_count: k,
            });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts, class_names })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Descending. The first entry is `+inf`, paired with the `(0, 0)` point.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
    pub positive_class: String,
}

/// ROC curve of `scores` against binary truths. Samples with tied scores
/// enter at the same threshold, so the trapezoidal area equals
/// `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`.
pub fn compute_roc_curve(scores: &[f64], truths: &[bool]) -> Result<RocCurve> {
    roc_curve_named(scores, truths, "positive")
}

fn roc_curve_named(scores: &[f64], truths: &[bool], positive_class: &str) -> Result<RocCurve> {
    if scores.len() != truths.len() {
        return Err(Error::Shape(format!("{} scores for {} truths", scores.len(), truths.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("ROC scores must be finite".into()));
    }
    let positives = truths.iter().filter(|t| **t).count();
    let negatives = truths.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateClass(positive_class.to_string()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(threshold);
        fpr.push(fp as f64 / negatives as f64);
        tpr.push(tp as f64 / positives as f64);
    }
    let auc = trapezoid(&fpr, &tpr);
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        auc,
        positive_class: positive_class.to_string(),
    })
}

/// Area under the piecewise-linear curve through `(x, y)`.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[1] + y[0]) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneVsRest {
    pub curves: Vec<RocCurve>,
    pub per_class_auc: IndexMap<String, f64>,
    /// Unweighted mean of the per-class areas.
    pub macro_auc: f64,
}

/// One ROC curve per column of `probabilities`, each class against the rest.
pub fn one_vs_rest_auc(probabilities: &Array2<f64>, truths: &[usize], class_names: &[String]) -> Result<OneVsRest> {
    let (n, k) = probabilities.dim();
    if n != truths.len() || k != class_names.len() {
        return Err(Error::Shape(format!(
            "probabilities {n}x{k} for {} truths and {} classes",
            truths.len(),
            class_names.len()
        )));
    }
    if let Some(&bad) = truths.iter().find(|&&t| t >= k) {
        return Err(Error::LabelRange {
            index: bad,
            class_count: k,
        });
    }
    let mut curves = Vec::with_capacity(k);
    for (c, name) in class_names.iter().enumerate() {
        let scores: Vec<f64> = probabilities.column(c).to_vec();
        let binary: Vec<bool> = truths.iter().map(|&t| t == c).collect();
        curves.push(roc_curve_named(&scores, &binary, name)?);
    }
    let per_class_auc: IndexMap<String, f64> = curves.iter().map(|c| (c.positive_class.clone(), c.auc)).collect();
    let macro_auc = per_class_auc.values().sum::<f64>() / k as f64;
    Ok(OneVsRest {
        curves,
        per_class_auc,
        macro_auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub n: usize,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub per_class_auc: IndexMap<String, f64>,
    /// Binary tasks: the area for the positive (second) class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_class_auc: Option<f64>,
    pub class_names: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub model_checksum: String,
    pub config_checksum: String,
    /// Set by whoever writes the report; excluded from artifact checksums.
    pub timestamp: Option<String>,
}

impl EvalReport {
    pub fn confusion_matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: self.confusion.clone(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Report plus the material behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub curves: Vec<RocCurve>,
    pub sample_ids: Vec<String>,
    pub predictions: Vec<Prediction>,
}

/// Deterministic inference over one split, in manifest order.
pub fn evaluate(
    state: &NetworkState,
    manifest: &DatasetManifest,
    split: Split,
    preprocess: &PreprocessSpec,
) -> Result<Evaluation> {
    crate::model::checkpoint::ensure_compatible(state, &manifest.taxonomy)?;
    let samples: Vec<_> = manifest.samples_in(split).collect();
    if samples.is_empty() {
        return Err(Error::Split(format!("the {split} split is empty")));
    }
    let images = load_images(manifest, &samples, preprocess)?;
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    let predictions = predict_images(state, &views)?;
    let truths: Vec<usize> = samples.iter().map(|s| s.label_index).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.predicted_index).collect();

    let names = state.taxonomy.class_names().to_vec();
    let k = names.len();
    let confusion = confusion_matrix_named(&predicted, &truths, names.clone())?;
    let mut probabilities = Array2::zeros((predictions.len(), k));
    for (mut row, p) in probabilities.rows_mut().into_iter().zip(&predictions) {
        row.iter_mut().zip(&p.probabilities).for_each(|(d, s)| *d = *s);
    }
    let ovr = one_vs_rest_auc(&probabilities, &truths, &names)?;
    let report = EvalReport {
        split,
        n: samples.len(),
        accuracy: compute_accuracy(&predicted, &truths)?,
        macro_auc: ovr.macro_auc,
        positive_class_auc: (k == 2).then(|| ovr.curves[1].auc),
        per_class_auc: ovr.per_class_auc,
        class_names: names,
        confusion: confusion.counts,
        model_checksum: state.weights_checksum(),
        config_checksum: sha256_hex(&serde_json::to_vec(&state.config)?),
        timestamp: None,
    };
    Ok(Evaluation {
        report,
        curves: ovr.curves,
        sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        predictions,
    })
}

pub const ROC_FIGURE: &str = "roc.png";
pub const CONFUSION_FIGURE: &str = "confusion.png";
pub const ROC_POINTS: &str = "roc_points.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";

/// Writes the ROC overlay, the confusion heatmap and their source numbers.
/// Returns the paths written.
pub fn render_figures(report: &EvalReport, curves: &[RocCurve], output: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let paths: Vec<PathBuf> = [ROC_FIGURE, CONFUSION_FIGURE, ROC_POINTS, CONFUSION_CSV]
        .iter()
        .map(|f| output.join(f))
        .collect();
    render_roc(curves, &paths[0])?;
    render_confusion(&report.confusion_matrix(), &paths[1])?;
    write_roc_points(curves, &paths[2])?;
    write_confusion_csv(&report.confusion_matrix(), &paths[3])?;
    Ok(paths)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))
}

fn write_roc_points(curves: &[RocCurve], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["class", "threshold", "fpr", "tpr"])
        .map_err(|e| Error::csv(path, e))?;
    for c in curves {
        for ((t, f), p) in c.thresholds.iter().zip(&c.fpr).zip(&c.tpr) {
            let threshold = if t.is_infinite() { "inf".to_string() } else { t.to_string() };
            w.write_record([c.positive_class.clone(), threshold, f.to_string(), p.to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_confusion_csv(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["true", "pred", "count"]).map_err(|e| Error::csv(path, e))?;
    for (t, row) in cm.counts.iter().enumerate() {
        for (p, count) in row.iter().enumerate() {
            w.write_record([cm.class_names[t].as_str(), cm.class_names[p].as_str(), &count.to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `roc_points.csv` back as per-class `(threshold, fpr, tpr)` lists.
pub fn read_roc_points(path: &Path) -> Result<IndexMap<String, Vec<(f64, f64, f64)>>> {
    #[derive(Deserialize)]
    struct Row {
        class: String,
        threshold: f64,
        fpr: f64,
        tpr: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out: IndexMap<String, Vec<(f64, f64, f64)>> = IndexMap::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        out.entry(row.class).or_default().push((row.threshold, row.fpr, row.tpr));
    }
    Ok(out)
}

const PLOT: i64 = 360;
const MARGIN_LEFT: i64 = 60;
const MARGIN_TOP: i64 = 40;

fn render_roc(curves: &[RocCurve], path: &Path) -> Result<()> {
    let legend_h = 14 * curves.len() as i64 + 10;
    let mut c = Canvas::new(
        (MARGIN_LEFT + PLOT + 30) as u32,
        (MARGIN_TOP + PLOT + 50 + legend_h) as u32,
        WHITE,
    );
    let to_px = |fpr: f64, tpr: f64| {
        (
            MARGIN_LEFT as f64 + fpr * PLOT as f64,
            (MARGIN_TOP + PLOT) as f64 - tpr * PLOT as f64,
        )
    };
    c.text(MARGIN_LEFT, 4, "ROC (one-vs-rest)", BLACK, 2);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let (x, y) = to_px(v, v);
        c.dashed_line(x, MARGIN_TOP as f64, x, (MARGIN_TOP + PLOT) as f64, [230, 230, 230], 1, None);
        c.dashed_line(
            MARGIN_LEFT as f64,
            y,
            (MARGIN_LEFT + PLOT) as f64,
            y,
            [230, 230, 230],
            1,
            None,
        );
        let label = format!("{v:.2}");
        c.text(x as i64 - 16, MARGIN_TOP + PLOT + 6, &label, BLACK, 1);
        c.text(MARGIN_LEFT - 40, y as i64 - 4, &label, BLACK, 1);
    }
    let (x0, y0) = to_px(0.0, 0.0);
    let (x1, y1) = to_px(1.0, 1.0);
    c.dashed_line(x0, y0, x1, y1, GRAY, 1, Some((6, 4)));
    // Frame first so curves along the edges stay visible.
    c.stroke_rect(MARGIN_LEFT, MARGIN_TOP, PLOT + 1, PLOT + 1, BLACK);
    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for w in curve.fpr.windows(2).zip(curve.tpr.windows(2)) {
            let (a, b) = to_px(w.0[0], w.1[0]);
            let (d, e) = to_px(w.0[1], w.1[1]);
            c.line(a, b, d, e, color, 2);
        }
        let ly = MARGIN_TOP + PLOT + 40 + 14 * i as i64;
        c.fill_rect(MARGIN_LEFT, ly, 16, 8, color);
        c.text(
            MARGIN_LEFT + 22,
            ly,
            &format!("{} (AUC {:.3})", curve.positive_class, curve.auc),
            BLACK,
            1,
        );
    }
    c.text(
        MARGIN_LEFT + PLOT / 2 - 96,
        MARGIN_TOP + PLOT + 22,
        "false positive rate",
        BLACK,
        1,
    );
    c.text(4, MARGIN_TOP - 12, "true positive rate", BLACK, 1);
    c.save_png(path)
}

fn render_confusion(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let k = cm.class_count().max(1) as i64;
    let cell = (PLOT / k).max(24);
    let label_w = cm.class_names.iter().map(|n| Canvas::text_width(n, 1)).max().unwrap_or(0) + 12;
    let width = label_w + cell * k + 20;
    let height = MARGIN_TOP + cell * k + 24 + label_w;
    let mut c = Canvas::new(width as u32, height as u32, WHITE);
    c.text(label_w, 12, "Confusion (rows: true)", BLACK, 2);
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (t, row) in cm.counts.iter().enumerate() {
        let y = MARGIN_TOP + t as i64 * cell;
        c.text(4, y + cell / 2 - 4, &cm.class_names[t], BLACK, 1);
        for (p, count) in row.iter().enumerate() {
            let x = label_w + p as i64 * cell;
            let color = heat_color(*count as f64 / max);
            c.fill_rect(x, y, cell, cell, color);
            let luma = 0.299 * color[0] as f64 + 0.587 * color[1] as f64 + 0.114 * color[2] as f64;
            let ink = if luma > 140.0 { BLACK } else { WHITE };
            let text = count.to_string();
            let scale = if cell >= 48 { 2 } else { 1 };
            c.text(
                x + (cell - Canvas::text_width(&text, scale)) / 2,
                y + cell / 2 - 4 * scale,
                &text,
                ink,
                scale,
            );
        }
    }
    // Predicted-class labels, one per row below the grid.
    for (p, name) in cm.class_names.iter().enumerate() {
        let x = label_w + p as i64 * cell + cell / 2 - 3;
        let y = MARGIN_TOP + k * cell + 8;
        c.fill_rect(x, y, 6, 6, PALETTE[p % PALETTE.len()]);
        c.text(4, y + 10 + 12 * p as i64, &format!("col {}: {name}", p + 1), BLACK, 1);
    }
    c.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(compute_accuracy(&[0, 2, 2, 1], &[0, 1, 2, 1]).unwrap(), 0.75);
        assert_eq!(compute_accuracy(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert_eq!(compute_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(matches!(compute_accuracy(&[0], &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn confusion_examples() {
        let cm = compute_confusion_matrix(&[0, 2, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 1, 1], vec![0, 0, 1]]);
        let perfect = compute_confusion_matrix(&[0, 0, 1, 2], &[0, 0, 1, 2], 3).unwrap();
        assert_eq!(perfect.counts, vec![vec![2, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let single = compute_confusion_matrix(&[1], &[1], 2).unwrap();
        assert_eq!(single.counts, vec![vec![0, 0], vec![0, 1]]);
        assert!(matches!(
            compute_confusion_matrix(&[3], &[0], 3),
            Err(Error::LabelRange {
                index: 3,
                class_count: 3
            })
        ));
    }

    #[test]
    fn roc_examples() {
        let r = compute_roc_curve(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(r.auc, 0.75);
        let sep = compute_roc_curve(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(sep.auc, 1.0);
        let ties = compute_roc_curve(&[0.3; 5], &[true, false, true, false, false]).unwrap();
        assert_eq!(ties.auc, 0.5);
        assert_eq!(ties.fpr, vec![0.0, 1.0]);
        assert!(matches!(
            compute_roc_curve(&[0.1, 0.2], &[true, true]),
            Err(Error::DegenerateClass(_))
        ));
    }

    #[test]
    fn roc_thresholds_descend_from_infinity() {
        let r = compute_roc_curve(&[0.5, 0.1, 0.5, 0.9], &[true, false, false, true]).unwrap();
        assert_eq!(r.thresholds, vec![f64::INFINITY, 0.9, 0.5, 0.1]);
        assert_eq!((r.fpr[0], r.tpr[0]), (0.0, 0.0));
        assert_eq!((*r.fpr.last().unwrap(), *r.tpr.last().unwrap()), (1.0, 1.0));
    }

    #[test]
    fn one_vs_rest_extremes() {
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let truths = [0, 1, 2, 0, 1, 2];
        let identity = Array2::from_shape_fn((6, 3), |(i, j)| if truths[i] == j { 1.0 } else { 0.0 });
        let ovr = one_vs_rest_auc(&identity, &truths, &names).unwrap();
        assert!(ovr.per_class_auc.values().all(|a| *a == 1.0));
        assert_eq!(ovr.macro_auc, 1.0);
        let uniform = Array2::from_elem((6, 3), 1.0 / 3.0);
        let ovr = one_vs_rest_auc(&uniform, &truths, &names).unwrap();
        assert!(ovr.per_class_auc.values().all(|a| *a == 0.5));
        match one_vs_rest_auc(&uniform, &[0, 1, 0, 1, 0, 1], &names) {
            Err(Error::DegenerateClass(c)) => assert_eq!(c, "c"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn figures_and_sources_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = ["neg", "pos"].map(String::from).to_vec();
        let truths = [0, 1, 0, 1];
        let probs = Array2::from_shape_vec((4, 2), vec![0.8, 0.2, 0.3, 0.7, 0.6, 0.4, 0.45, 0.55]).unwrap();
        let ovr = one_vs_rest_auc(&probs, &truths, &names).unwrap();
        let cm = confusion_matrix_named(&[0, 1, 0, 1], &truths, names.clone()).unwrap();
        let report = EvalReport {
            split: Split::Test,
            n: 4,
            accuracy: cm.accuracy(),
            macro_auc: ovr.macro_auc,
            per_class_auc: ovr.per_class_auc.clone(),
            positive_class_auc: Some(ovr.curves[1].auc),
            class_names: names,
            confusion: cm.counts.clone(),
            model_checksum: "m".into(),
            config_checksum: "c".into(),
            timestamp: None,
        };
        let paths = render_figures(&report, &ovr.curves, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        assert!(paths.iter().all(|p| p.exists()));
        let confusion = fs::read_to_string(dir.path().join(CONFUSION_CSV)).unwrap();
        assert_eq!(confusion.lines().count(), 5);
        let points = read_roc_points(&dir.path().join(ROC_POINTS)).unwrap();
        for curve in &ovr.curves {
            let back = &points[&curve.positive_class];
            assert_eq!(back.len(), curve.fpr.len());
            for (i, (t, f, p)) in back.iter().enumerate() {
                assert_eq!((*t, *f, *p), (curve.thresholds[i], curve.fpr[i], curve.tpr[i]));
            }
        }
        let img = image::open(dir.path().join(CONFUSION_FIGURE)).unwrap();
        assert!(img.width() > 0);
    }
}

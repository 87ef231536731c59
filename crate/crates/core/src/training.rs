//! Mini-batch training with cross-entropy loss, per-epoch validation, early
//! stopping and best-state selection, plus finite-difference gradient checks
//! of the dense head.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_images, DatasetManifest, PreprocessSpec, Split};
use crate::error::{Error, Result};
use crate::model::checkpoint::NamedTensor;
use crate::model::{
    dropout_mask, head_backward, head_forward, predict_images, softmax, BackboneTrace, Gradients, HeadWeights, NetworkState,
    Param, Real,
};
use crate::seed::{derive_seed, labels, stream};

/// Probabilities are clamped to this floor before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum,
    AdaptiveMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Momentum for `sgd_momentum`.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Epochs without validation-loss improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Random horizontal and vertical flips of training images.
    pub augment_flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::AdaptiveMoments,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            early_stop_patience: 5,
            seed: 0,
            augment_flips: false,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted as a null-update probe.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss (earliest on ties); 0 before
    /// the first epoch.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Train-split loss of the initial weights.
    pub initial_train_loss: f64,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"])
            .map_err(|e| Error::csv(path, e))?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.val_loss.to_string(),
                r.val_acc.to_string(),
                format!("{:.3}", r.seconds),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochRecord>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
    }
}

/// Mean of `-ln(max(p_true, 1e-12))` over rows.
pub fn cross_entropy_loss(probabilities: &Array2<f64>, one_hot_labels: &Array2<f64>) -> Result<f64> {
    if probabilities.dim() != one_hot_labels.dim() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs labels {:?}",
            probabilities.dim(),
            one_hot_labels.dim()
        )));
    }
    let n = probabilities.nrows();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let total: f64 = probabilities
        .rows()
        .into_iter()
        .zip(one_hot_labels.rows())
        .map(|(p, y)| p.iter().zip(y).map(|(p, y)| -y * p.max(PROBABILITY_FLOOR).ln()).sum::<f64>())
        .sum();
    Ok(total / n as f64)
}

/// Loss and accuracy of inference-mode predictions over a set of images.
pub fn score_images(state: &NetworkState, images: &[ArrayView3<'_, f32>], labels: &[usize]) -> Result<(f64, f64)> {
    let preds = predict_images(state, images)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, &y) in preds.iter().zip(labels) {
        loss -= p.probabilities[y].max(PROBABILITY_FLOOR).ln();
        correct += usize::from(p.predicted_index == y);
    }
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

struct LabeledImages {
    images: Vec<Array3<f32>>,
    labels: Vec<usize>,
}

impl LabeledImages {
    fn load(manifest: &DatasetManifest, split: Split, spec: &PreprocessSpec) -> Result<Self> {
        let samples: Vec<_> = manifest.samples_in(split).collect();
        if samples.is_empty() {
            return Err(Error::Split(format!("the {split} split is empty")));
        }
        Ok(LabeledImages {
            images: load_images(manifest, &samples, spec)?,
            labels: samples.iter().map(|s| s.label_index).collect(),
        })
    }

    fn views(&self) -> Vec<ArrayView3<'_, f32>> {
        self.images.iter().map(|a| a.view()).collect()
    }
}

fn flip(image: &Array3<f32>, horizontal: bool, vertical: bool) -> Array3<f32> {
    match (horizontal, vertical) {
        (false, false) => image.clone(),
        (true, false) => image.slice(s![.., ..;-1, ..]).to_owned(),
        (false, true) => image.slice(s![..;-1, .., ..]).to_owned(),
        (true, true) => image.slice(s![..;-1, ..;-1, ..]).to_owned(),
    }
}

/// Optimizer moments in a portable form: tensors are named
/// `first/<param>` and `second/<param>` (the latter only for adaptive
/// moments).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerMoments {
    pub steps: u32,
    pub tensors: Vec<NamedTensor>,
}

struct OptimizerState {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: i32,
}

impl OptimizerState {
    fn new(grads: &Gradients) -> Self {
        let zeros = || grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect();
        OptimizerState {
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    fn export(&self, state: &NetworkState, optimizer: Optimizer) -> OptimizerMoments {
        let mut tensors = Vec::new();
        for (prefix, moments) in [("first", &self.first), ("second", &self.second)] {
            if prefix == "second" && optimizer == Optimizer::SgdMomentum {
                continue;
            }
            for p in state.params() {
                let m = &moments[p.slot];
                if !m.is_empty() {
                    tensors.push(NamedTensor {
                        name: format!("{prefix}/{}", p.name),
                        shape: p.shape.clone(),
                        values: m.clone(),
                    });
                }
            }
        }
        OptimizerMoments {
            steps: self.steps as u32,
            tensors,
        }
    }

    /// Rebuilds the state from exported moments; every tensor must match a
    /// trainable parameter and every slot in use must be covered.
    fn restore(grads: &Gradients, state: &NetworkState, optimizer: Optimizer, saved: &OptimizerMoments) -> Result<Self> {
        let mut out = Self::new(grads);
        let mut filled = 0;
        for t in &saved.tensors {
            let (prefix, name) = t.name.split_once('/').unwrap_or(("", &t.name));
            let target = match prefix {
                "first" => &mut out.first,
                "second" if optimizer == Optimizer::AdaptiveMoments => &mut out.second,
                _ => return Err(Error::Compatibility(format!("unexpected optimizer tensor `{}`", t.name))),
            };
            let slot = state
                .params()
                .into_iter()
                .find(|p| p.name == name)
                .map(|p| p.slot)
                .filter(|&s| target[s].len() == t.values.len())
                .ok_or_else(|| Error::Compatibility(format!("optimizer tensor `{}` matches no trainable parameter", t.name)))?;
            target[slot].copy_from_slice(&t.values);
            filled += 1;
        }
        let per_kind = grads.tensors.iter().filter(|g| !g.is_empty()).count();
        let expected = if optimizer == Optimizer::AdaptiveMoments {
            2 * per_kind
        } else {
            per_kind
        };
        if filled != expected {
            return Err(Error::Compatibility(format!(
                "{filled} optimizer tensors saved, {expected} needed"
            )));
        }
        out.steps = saved.steps as i32;
        Ok(out)
    }

    fn step(&mut self, config: &TrainConfig, params: Vec<&mut Param>, grads: &Gradients) {
        self.steps += 1;
        let lr = config.learning_rate;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        for p in params {
            let g = &grads.tensors[p.slot];
            if g.is_empty() {
                continue;
            }
            let m = &mut self.first[p.slot];
            match config.optimizer {
                Optimizer::SgdMomentum => {
                    let mu = config.momentum as f32;
                    for ((w, g), m) in p.value.iter_mut().zip(g).zip(m.iter_mut()) {
                        *m = mu * *m + g;
                        *w -= (lr as f32) * *m;
                    }
                }
                Optimizer::AdaptiveMoments => {
                    let v = &mut self.second[p.slot];
                    let step = (lr * c2.sqrt() / c1) as f32;
                    let eps = (config.adam_epsilon * c2.sqrt()) as f32;
                    for (((w, g), m), v) in p.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 as f32 * *m + (1.0 - b1 as f32) * g;
                        *v = b2 as f32 * *v + (1.0 - b2 as f32) * g * g;
                        *w -= step * *m / (v.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Samples per backward chunk. Chunks are reduced in index order, so the
/// summed gradient does not depend on the number of worker threads.
const BACKWARD_CHUNK: usize = 4;

/// Mean loss over the batch and its gradient with respect to every
/// trainable parameter.
fn batch_gradients(
    state: &NetworkState,
    images: &[ArrayView3<'_, f32>],
    labels: &[usize],
    mask: Option<Vec<f32>>,
    include_backbone: bool,
) -> (f64, Gradients) {
    let n = images.len();
    let k = state.class_count();
    let (features, traces): (Vec<f32>, Vec<BackboneTrace>) = if include_backbone {
        let per_sample: Vec<(Vec<f32>, BackboneTrace)> = images
            .par_iter()
            .map(|img| state.backbone.forward_traced(NetworkState::feature_map(*img)))
            .collect();
        let mut features = Vec::with_capacity(n * state.feature_width());
        let mut traces = Vec::with_capacity(n);
        for (f, t) in per_sample {
            features.extend(f);
            traces.push(t);
        }
        (features, traces)
    } else {
        (state.extract_features(images), Vec::new())
    };

    let weights = state.head.weights_f32();
    let trace = head_forward(weights, features, n, mask);
    let (loss, dlogits) = softmax_cross_entropy(&trace.logits, labels, k);
    let head_grads = head_backward(weights, &trace, &dlogits, include_backbone);

    let mut grads = state.zero_gradients(include_backbone);
    for (i, dense) in state.head.layers().into_iter().enumerate() {
        if let Some(g) = grads.slot_mut(&dense.weight) {
            g.copy_from_slice(&head_grads.weights[i]);
        }
        if let Some(g) = grads.slot_mut(&dense.bias) {
            g.copy_from_slice(&head_grads.biases[i]);
        }
    }
    if include_backbone {
        let f = state.feature_width();
        let work: Vec<(BackboneTrace, &[f32])> = traces.into_iter().zip(head_grads.input.chunks_exact(f)).collect();
        let mut chunks: Vec<Vec<(BackboneTrace, &[f32])>> = Vec::new();
        let mut iter = work.into_iter().peekable();
        while iter.peek().is_some() {
            chunks.push(iter.by_ref().take(BACKWARD_CHUNK).collect());
        }
        let partials: Vec<Gradients> = chunks
            .into_par_iter()
            .map(|chunk| {
                let mut g = state.zero_gradients(true);
                for (t, df) in chunk {
                    state.backbone.backward(t, df, &mut g);
                }
                g
            })
            .collect();
        // Partials carry zeros in the head slots.
        for partial in &partials {
            grads.add_assign(partial);
        }
    }
    (loss, grads)
}

/// Training state carried over from an interrupted run.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub best: NetworkState,
    pub history: TrainHistory,
    pub epochs_since_best: usize,
    pub optimizer: OptimizerMoments,
}

/// Snapshot handed to the per-epoch callback.
pub struct EpochReport<'a> {
    pub record: &'a EpochRecord,
    pub state: &'a NetworkState,
    pub best: &'a NetworkState,
    pub history: &'a TrainHistory,
    pub improved: bool,
    pub epochs_since_best: usize,
    pub optimizer: OptimizerMoments,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<ResumeState>,
    /// Called after every epoch, e.g. to write checkpoints.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochReport<'_>) -> Result<()>>,
}

pub fn train(
    state: NetworkState,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    preprocess: &PreprocessSpec,
) -> Result<(NetworkState, TrainHistory)> {
    train_with(state, manifest, config, preprocess, TrainOptions::default())
}

/// Trains `state` and returns the best-validation-loss state and the
/// history. Shuffling and dropout streams for epoch `e` are derived from the
/// config seed and `e`, and optimizer moments are carried in the resume
/// state, so a resumed run matches an uninterrupted one exactly.
pub fn train_with(
    mut state: NetworkState,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    preprocess: &PreprocessSpec,
    mut options: TrainOptions<'_>,
) -> Result<(NetworkState, TrainHistory)> {
    config.validate()?;
    preprocess.validate()?;
    if manifest.taxonomy != state.taxonomy {
        return Err(Error::Compatibility("manifest taxonomy differs from the model's".into()));
    }
    let train_set = LabeledImages::load(manifest, Split::Train, preprocess)?;
    let val_set = LabeledImages::load(manifest, Split::Val, preprocess)?;
    if config.batch_size > train_set.labels.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training samples",
            config.batch_size,
            train_set.labels.len()
        )));
    }
    let train_views = train_set.views();
    let val_views = val_set.views();

    let include_backbone = !state.config.backbone_frozen && state.backbone.params().iter().any(|p| p.trainable);
    // A frozen backbone without augmentation sees the same images every
    // epoch, so its features are computed once.
    let cached_features = (!include_backbone && !config.augment_flips).then(|| state.extract_features(&train_views));

    let template = state.zero_gradients(include_backbone);
    let (mut best, mut history, mut since_best, mut optimizer) = match options.resume.take() {
        Some(r) => {
            let optimizer = OptimizerState::restore(&template, &state, config.optimizer, &r.optimizer)?;
            (r.best, r.history, r.epochs_since_best, optimizer)
        }
        None => {
            let (initial_loss, _) = score_images(&state, &train_views, &train_set.labels)?;
            let history = TrainHistory {
                initial_train_loss: initial_loss,
                ..TrainHistory::default()
            };
            (state.clone(), history, 0, OptimizerState::new(&template))
        }
    };
    let start_epoch = history.records.len() + 1;
    if history.stopped_early {
        return Ok((best, history));
    }

    let n = train_set.labels.len();
    let u1 = state.head.dense1.outputs();
    let f = state.feature_width();

    for epoch in start_epoch..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle = stream(derive_seed(derive_seed(config.seed, labels::SHUFFLE), &epoch.to_string()));
        order.shuffle(&mut shuffle);
        let mut dropout = stream(derive_seed(derive_seed(config.seed, labels::DROPOUT), &epoch.to_string()));

        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let batch_labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let mask = Some(dropout_mask(state.head.dropout_rate, batch.len() * u1, &mut dropout));
            let (loss, grads) = if let Some(cache) = &cached_features {
                let features: Vec<f32> = batch
                    .iter()
                    .flat_map(|&i| cache[i * f..(i + 1) * f].iter().copied())
                    .collect();
                head_only_gradients(&state, features, &batch_labels, mask)
            } else {
                let flipped: Vec<Array3<f32>>;
                let views: Vec<ArrayView3<'_, f32>> = if config.augment_flips {
                    flipped = batch
                        .iter()
                        .map(|&i| flip(&train_set.images[i], shuffle.random(), shuffle.random()))
                        .collect();
                    flipped.iter().map(|a| a.view()).collect()
                } else {
                    batch.iter().map(|&i| train_views[i]).collect()
                };
                batch_gradients(&state, &views, &batch_labels, mask, include_backbone)
            };
            let finite_grads = grads.tensors.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !loss.is_finite() || !finite_grads {
                return Err(Error::Divergence { epoch, step: step + 1 });
            }
            optimizer.step(config, state.params_mut(), &grads);
        }
        if state.params().iter().any(|p| p.value.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                epoch,
                step: n.div_ceil(config.batch_size),
            });
        }

        let (train_loss, train_acc) = score_images(&state, &train_views, &train_set.labels)?;
        let (val_loss, val_acc) = score_images(&state, &val_views, &val_set.labels)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: n.div_ceil(config.batch_size),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        let improved = history.best().is_none_or(|b| val_loss < b.val_loss);
        if improved {
            history.best_epoch = epoch;
            best = state.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.records.push(record);
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.4} train_acc {train_acc:.4} val_loss {val_loss:.4} val_acc {val_acc:.4}"
        );
        let stop = config.early_stop_patience > 0 && since_best >= config.early_stop_patience;
        history.stopped_early = stop && epoch < config.epochs;
        if let Some(cb) = options.on_epoch.as_deref_mut() {
            cb(&EpochReport {
                record: history.records.last().expect("just pushed"),
                state: &state,
                best: &best,
                history: &history,
                improved,
                epochs_since_best: since_best,
                optimizer: optimizer.export(&state, config.optimizer),
            })?;
        }
        if stop {
            break;
        }
    }
    Ok((best, history))
}

fn head_only_gradients(state: &NetworkState, features: Vec<f32>, labels: &[usize], mask: Option<Vec<f32>>) -> (f64, Gradients) {
    let n = labels.len();
    let k = state.class_count();
    let weights = state.head.weights_f32();
    let trace = head_forward(weights, features, n, mask);
    let (loss, dlogits) = softmax_cross_entropy(&trace.logits, labels, k);
    let head_grads = head_backward(weights, &trace, &dlogits, false);
    let mut grads = state.zero_gradients(false);
    for (i, dense) in state.head.layers().into_iter().enumerate() {
        if let Some(g) = grads.slot_mut(&dense.weight) {
            g.copy_from_slice(&head_grads.weights[i]);
        }
        if let Some(g) = grads.slot_mut(&dense.bias) {
            g.copy_from_slice(&head_grads.biases[i]);
        }
    }
    (loss, grads)
}

/// Mean clamped cross-entropy of row-major logits and its gradient.
fn softmax_cross_entropy<T: Real>(logits: &[T], labels: &[usize], k: usize) -> (f64, Vec<T>) {
    let n = labels.len();
    let mut loss = 0.0f64;
    let mut dlogits = vec![T::zero(); n * k];
    for ((row, d), &y) in logits.chunks_exact(k).zip(dlogits.chunks_exact_mut(k)).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| Real::to_f64(*v)).collect();
        let p = softmax(&row);
        loss -= p[y].max(PROBABILITY_FLOOR).ln();
        for (j, (d, p)) in d.iter_mut().zip(&p).enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            *d = T::from((p - target) / n as f64).expect("representable");
        }
    }
    (loss / n as f64, dlogits)
}

/// Head layer addressed by a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayer {
    Dense1,
    Dense2,
    Output,
}

impl HeadLayer {
    pub const ALL: [HeadLayer; 3] = [HeadLayer::Dense1, HeadLayer::Dense2, HeadLayer::Output];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a ReLU changed state between `w - eps`
    /// and `w + eps`, where the loss is not differentiable.
    pub skipped_kinks: usize,
}

/// Coordinates sampled per tensor.
const CHECK_WEIGHTS: usize = 200;
const CHECK_BIASES: usize = 100;

/// Compares analytic head gradients with central differences, in `f64`,
/// with dropout disabled. Backbone features are computed once from `batch`.
pub fn gradient_check(
    state: &NetworkState,
    batch: &[ArrayView3<'_, f32>],
    labels: &[usize],
    layer: HeadLayer,
    epsilon: f64,
) -> Result<GradientCheck> {
    for img in batch {
        state.check_input(img.shape())?;
    }
    let features: Vec<f64> = state.extract_features(batch).into_iter().map(f64::from).collect();
    gradient_check_features(state, &features, labels, layer, epsilon)
}

/// As [`gradient_check`], starting from pooled features (`n x F`).
pub fn gradient_check_features(
    state: &NetworkState,
    features: &[f64],
    labels: &[usize],
    layer: HeadLayer,
    epsilon: f64,
) -> Result<GradientCheck> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = labels.len();
    let k = state.class_count();
    let dims = state.head.dims();
    if n == 0 || features.len() != n * dims[0] {
        return Err(Error::Shape(format!(
            "{} feature values for {n} samples of width {}",
            features.len(),
            dims[0]
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelRange {
            index: bad,
            class_count: k,
        });
    }
    let mut weights: [Vec<f64>; 3] = state
        .head
        .layers()
        .map(|d| d.weight.value.iter().map(|v| f64::from(*v)).collect());
    let mut biases: [Vec<f64>; 3] = state
        .head
        .layers()
        .map(|d| d.bias.value.iter().map(|v| f64::from(*v)).collect());

    let evaluate = |weights: &[Vec<f64>; 3], biases: &[Vec<f64>; 3], with_grads: bool| {
        let view = HeadWeights {
            weights: [&weights[0][..], &weights[1][..], &weights[2][..]],
            biases: [&biases[0][..], &biases[1][..], &biases[2][..]],
            dims,
        };
        let trace = head_forward(view, features.to_vec(), n, None);
        let (loss, dlogits) = softmax_cross_entropy(&trace.logits, labels, k);
        let active: Vec<bool> = trace.z1.iter().chain(&trace.z2).map(|z| *z > 0.0).collect();
        let grads = with_grads.then(|| head_backward(view, &trace, &dlogits, false));
        (loss, active, grads)
    };
    let analytic = evaluate(&weights, &biases, true).2.expect("requested");

    let li = layer.index();
    let mut rng = stream(derive_seed(0, "gradient_check"));
    let mut report = GradientCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for is_bias in [false, true] {
        let (len, quota) = if is_bias {
            (biases[li].len(), CHECK_BIASES)
        } else {
            (weights[li].len(), CHECK_WEIGHTS)
        };
        let mut coords: Vec<usize> = (0..len).collect();
        if len > quota {
            coords.shuffle(&mut rng);
        }
        let mut taken = 0;
        for idx in coords {
            if taken == quota {
                break;
            }
            let grad = if is_bias {
                analytic.biases[li][idx]
            } else {
                analytic.weights[li][idx]
            };
            let original = *coordinate(&mut weights, &mut biases, is_bias, li, idx);
            *coordinate(&mut weights, &mut biases, is_bias, li, idx) = original + epsilon;
            let (plus, plus_active, _) = evaluate(&weights, &biases, false);
            *coordinate(&mut weights, &mut biases, is_bias, li, idx) = original - epsilon;
            let (minus, minus_active, _) = evaluate(&weights, &biases, false);
            *coordinate(&mut weights, &mut biases, is_bias, li, idx) = original;
            if plus_active != minus_active {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let scale = grad.abs().max(numeric.abs()).max(1e-8);
            report.max_relative_error = report.max_relative_error.max((grad - numeric).abs() / scale);
            report.checked += 1;
            taken += 1;
        }
    }
    Ok(report)
}

fn coordinate<'a>(
    weights: &'a mut [Vec<f64>; 3],
    biases: &'a mut [Vec<f64>; 3],
    is_bias: bool,
    layer: usize,
    idx: usize,
) -> &'a mut f64 {
    if is_bias {
        &mut biases[layer][idx]
    } else {
        &mut weights[layer][idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_examples() {
        let perfect = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(cross_entropy_loss(&perfect, &perfect).unwrap(), 0.0);

        let uniform = Array2::from_elem((3, 4), 0.25);
        let labels = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        assert!((cross_entropy_loss(&uniform, &labels).unwrap() - 1.3862943611198906).abs() < 1e-12);

        let loss = cross_entropy_loss(&array![[0.7, 0.3]], &array![[1.0, 0.0]]).unwrap();
        assert!((loss - 0.35667494393873245).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let loss = cross_entropy_loss(&array![[0.0, 1.0]], &array![[1.0, 0.0]]).unwrap();
        assert!((loss - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_shape_errors() {
        let p = Array2::from_elem((2, 3), 1.0 / 3.0);
        assert!(matches!(cross_entropy_loss(&p, &Array2::zeros((2, 2))), Err(Error::Shape(_))));
        assert!(matches!(
            cross_entropy_loss(&Array2::zeros((0, 2)), &Array2::zeros((0, 2))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero_lr = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(zero_lr.validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: f64::INFINITY,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta2: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                adam_epsilon: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let history = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                train_acc: 0.75,
                val_loss: 0.625,
                val_acc: 0.5,
                seconds: 1.25,
            }],
            best_epoch: 1,
            ..TrainHistory::default()
        };
        history.write_csv(&path).unwrap();
        assert_eq!(TrainHistory::read_csv(&path).unwrap(), history.records);
    }
}

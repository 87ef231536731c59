//! Classifier construction and inference.
//!
//! A model is a convolutional backbone followed by a fixed head:
//!
//! ```text
//! backbone -> global average pooling -> dense(1024, relu) -> dropout(0.5)
//!          -> dense(512, relu) -> dense(classes, softmax)
//! ```
//!
//! Binary tasks use a two-way softmax so both modes share one evaluation path.

mod backbone;
pub mod checkpoint;
mod head;
mod layers;
mod tensor;

use std::fmt;
use std::path::PathBuf;

use ndarray::{Array2, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backbone::{global_average_pool, Backbone, BackboneKind, GAP_LAYER};
pub use head::{apply_dropout, dropout_mask, Dense, Head};
pub use layers::{BatchNorm, Conv2d, Layer, MaxPool, Param, Residual};
pub use tensor::{FeatureMap, Real};

pub(crate) use backbone::BackboneTrace;
pub(crate) use head::{head_backward, head_forward, HeadWeights};
pub(crate) use layers::Gradients;

use crate::dataset::LabelTaxonomy;
use crate::error::{Error, Result};
use crate::seed::{stream, Stream};

/// Environment variable naming the directory that holds pretrained weights.
pub const CACHE_DIR_ENV: &str = "PIPELINE_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub pretrained_init: bool,
    pub backbone_frozen: bool,
    pub dense1_units: usize,
    pub dropout_rate: f32,
    pub dense2_units: usize,
    /// `[height, width, channels]`.
    pub input_shape: [usize; 3],
    /// Explicit weight file; defaults to `$PIPELINE_CACHE_DIR/<backbone>_imagenet.cfw`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<PathBuf>,
    /// Hex SHA-256 the weight file must match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_sha256: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Resnet50,
            pretrained_init: true,
            backbone_frozen: true,
            dense1_units: 1024,
            dropout_rate: 0.5,
            dense2_units: 512,
            input_shape: [224, 224, 3],
            pretrained_weights: None,
            pretrained_sha256: None,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: the small backbone trained from scratch with
    /// the default head.
    pub fn small_cnn(height: usize, width: usize, channels: usize) -> Self {
        ModelConfig {
            backbone: BackboneKind::SmallCnn,
            pretrained_init: false,
            backbone_frozen: false,
            input_shape: [height, width, channels],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dense1_units == 0 || self.dense2_units == 0 {
            return Err(Error::Config("dense layer widths must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        let [h, w, c] = self.input_shape;
        if h < 32 || w < 32 {
            return Err(Error::Config(format!("input {h}x{w} is below the 32x32 minimum")));
        }
        if c != 1 && c != 3 {
            return Err(Error::Config(format!("input channels must be 1 or 3, got {c}")));
        }
        Ok(())
    }

    pub fn pretrained_path(&self) -> PathBuf {
        if let Some(p) = &self.pretrained_weights {
            return p.clone();
        }
        let file = format!("{}_imagenet.cfw", self.backbone.as_str());
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) => PathBuf::from(dir).join(file),
            None => PathBuf::from(format!("${CACHE_DIR_ENV}")).join(file),
        }
    }
}

/// One stage of the assembled network, for introspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Backbone(BackboneKind),
    GlobalAveragePooling,
    Dense {
        units: usize,
        activation: Activation,
    },
    /// Rate in thousandths, to keep the type `Eq`.
    Dropout {
        rate_milli: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Backbone(k) => write!(f, "{}", k.as_str()),
            Stage::GlobalAveragePooling => f.write_str("global_average_pooling"),
            Stage::Dense { units, activation } => write!(f, "dense({units}, {activation:?})"),
            Stage::Dropout { rate_milli } => write!(f, "dropout({})", *rate_milli as f64 / 1000.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub config: ModelConfig,
    pub taxonomy: LabelTaxonomy,
    pub backbone: Backbone,
    pub head: Head,
}

/// Builds a network. Weights are drawn from a stream seeded by `seed`
/// (backbone first, then head) unless pretrained backbone weights are
/// requested, in which case they are read from the pinned local artifact.
pub fn build_model(config: &ModelConfig, taxonomy: &LabelTaxonomy, seed: u64) -> Result<NetworkState> {
    config.validate()?;
    let mut rng = stream(seed);
    let backbone = Backbone::new(config.backbone, config.input_shape[2], &mut rng);
    let [h, w, c] = config.input_shape;
    if backbone.layer_shapes((h, w, c)).is_none() {
        return Err(Error::Config(format!(
            "input {h}x{w}x{c} is too small for {}",
            config.backbone.as_str()
        )));
    }
    let head = Head::new(
        backbone.feature_width(),
        config.dense1_units,
        config.dense2_units,
        taxonomy.class_count(),
        config.dropout_rate,
        &mut rng,
    );
    let mut state = NetworkState {
        config: config.clone(),
        taxonomy: taxonomy.clone(),
        backbone,
        head,
    };
    state.assign_slots();
    if config.pretrained_init {
        checkpoint::load_pretrained_backbone(&mut state)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
}

/// Per-sample output of [`predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Argmax of `probabilities`; ties go to the lowest index.
    pub predicted_index: usize,
    /// Pre-softmax logits.
    pub scores_raw: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let probabilities = softmax(logits);
        Prediction {
            predicted_index: argmax(&probabilities),
            probabilities,
            scores_raw: logits.to_vec(),
        }
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl NetworkState {
    pub fn class_count(&self) -> usize {
        self.taxonomy.class_count()
    }

    pub fn feature_width(&self) -> usize {
        self.backbone.feature_width()
    }

    /// The assembled stage sequence.
    pub fn architecture(&self) -> Vec<Stage> {
        vec![
            Stage::Backbone(self.config.backbone),
            Stage::GlobalAveragePooling,
            Stage::Dense {
                units: self.head.dense1.outputs(),
                activation: Activation::Relu,
            },
            Stage::Dropout {
                rate_milli: (self.head.dropout_rate * 1000.0).round() as u32,
            },
            Stage::Dense {
                units: self.head.dense2.outputs(),
                activation: Activation::Relu,
            },
            Stage::Dense {
                units: self.head.output.outputs(),
                activation: Activation::Softmax,
            },
        ]
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.backbone.layer_ids()
    }

    /// All parameters: backbone in layer order, then head.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.backbone.params();
        for d in self.head.layers() {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.backbone.params_mut();
        for d in self.head.layers_mut() {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn assign_slots(&mut self) {
        for (i, p) in self.params_mut().into_iter().enumerate() {
            p.slot = i;
        }
    }

    pub(crate) fn zero_gradients(&self, include_backbone: bool) -> Gradients {
        let backbone_count = self.backbone.params().len();
        let tensors = self
            .params()
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                if p.trainable && (include_backbone || i >= backbone_count) {
                    vec![0.0; p.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Gradients { tensors }
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn weights_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params() {
            hasher.update(p.name.as_bytes());
            for d in &p.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &p.value {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [h, w, c] = self.config.input_shape;
        if shape != [h, w, c] {
            return Err(Error::Shape(format!("expected input {h}x{w}x{c}, got {shape:?}")));
        }
        Ok(())
    }

    pub(crate) fn feature_map(image: ArrayView3<'_, f32>) -> FeatureMap {
        let (h, w, c) = image.dim();
        FeatureMap {
            h,
            w,
            c,
            data: image.iter().copied().collect(),
        }
    }

    /// Pooled backbone features for each image, `n x feature_width`,
    /// computed in parallel on the current rayon pool.
    pub(crate) fn extract_features(&self, images: &[ArrayView3<'_, f32>]) -> Vec<f32> {
        let per_sample: Vec<Vec<f32>> = images
            .par_iter()
            .map(|img| self.backbone.forward(Self::feature_map(*img), None, None).0)
            .collect();
        per_sample.concat()
    }

    /// Logits for a batch of images in inference or training mode.
    pub(crate) fn logits(&self, images: &[ArrayView3<'_, f32>], mask: Option<Vec<f32>>) -> Vec<f32> {
        let features = self.extract_features(images);
        head_forward(self.head.weights_f32(), features, images.len(), mask).logits
    }
}

fn validate_batch(state: &NetworkState, batch: &Array4<f32>) -> Result<()> {
    let shape = batch.shape();
    state.check_input(&shape[1..])?;
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("input batch contains non-finite values".into()));
    }
    Ok(())
}

/// Forward pass over an `n x h x w x c` batch. In training mode inverted
/// dropout draws its mask from `rng`; inference ignores `rng` and is
/// bit-for-bit repeatable.
pub fn forward(state: &NetworkState, batch: &Array4<f32>, training_mode: bool, rng: &mut Stream) -> Result<ForwardOutput> {
    validate_batch(state, batch)?;
    let n = batch.len_of(Axis(0));
    let images: Vec<ArrayView3<'_, f32>> = batch.outer_iter().collect();
    let mask = training_mode.then(|| dropout_mask(state.head.dropout_rate, n * state.head.dense1.outputs(), rng));
    let logits = state.logits(&images, mask);
    let k = state.class_count();
    let logits =
        Array2::from_shape_vec((n, k), logits.into_iter().map(f64::from).collect()).map_err(|e| Error::Shape(e.to_string()))?;
    let mut probabilities = logits.clone();
    for mut row in probabilities.rows_mut() {
        let p = softmax(row.as_slice().expect("contiguous"));
        row.iter_mut().zip(p).for_each(|(d, s)| *d = s);
    }
    Ok(ForwardOutput { logits, probabilities })
}

/// Inference-mode predictions, one per batch row.
pub fn predict(state: &NetworkState, batch: &Array4<f32>) -> Result<Vec<Prediction>> {
    // Inference mode never touches the stream.
    let out = forward(state, batch, false, &mut stream(0))?;
    Ok(out
        .logits
        .rows()
        .into_iter()
        .map(|r| Prediction::from_logits(r.as_slice().expect("contiguous")))
        .collect())
}

/// Images per inference chunk. Fixed so results never depend on how a
/// caller groups its inputs.
const INFERENCE_CHUNK: usize = 64;

/// Inference-mode predictions for individually stored images.
pub fn predict_images(state: &NetworkState, images: &[ArrayView3<'_, f32>]) -> Result<Vec<Prediction>> {
    for img in images {
        state.check_input(img.shape())?;
        if img.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("input image contains non-finite values".into()));
        }
    }
    let k = state.class_count();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFERENCE_CHUNK) {
        let logits = state.logits(chunk, None);
        out.extend(logits.chunks_exact(k).map(|row| {
            let row: Vec<f64> = row.iter().map(|v| f64::from(*v)).collect();
            Prediction::from_logits(&row)
        }));
    }
    Ok(out)
}

/// Stacks preprocessed images into a batch.
pub fn stack_batch(images: &[&ndarray::Array3<f32>]) -> Result<Array4<f32>> {
    let views: Vec<ArrayView3<'_, f32>> = images.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

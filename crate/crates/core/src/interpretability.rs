//! Activation capture and heat overlays.
//!
//! Heat maps are raw activations reduced over channels, min-max normalized
//! (a constant map becomes all zeros) and bilinearly upsampled to the input
//! size with half-pixel centers, so each map cell lands on the center of the
//! input region it summarizes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_images, DatasetManifest, PreprocessSpec, Split};
use crate::error::{Error, Result};
use crate::model::{head_forward, FeatureMap, NetworkState, Prediction};
use crate::raster::heat_color;
use crate::seed::{derive_seed, labels, unit_hash};

/// Maximum overlay opacity, reached where the heat is 1.
pub const OVERLAY_ALPHA: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    ChannelMean,
    ChannelMax,
    SingleChannel(usize),
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reduction::ChannelMean => f.write_str("channel_mean"),
            Reduction::ChannelMax => f.write_str("channel_max"),
            Reduction::SingleChannel(i) => write!(f, "channel_{i}"),
        }
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_mean" | "mean" => Ok(Reduction::ChannelMean),
            "channel_max" | "max" => Ok(Reduction::ChannelMax),
            other => other
                .strip_prefix("channel_")
                .and_then(|i| i.parse().ok())
                .map(Reduction::SingleChannel)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown reduction `{other}`; expected channel_mean, channel_max or channel_<index>"
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layer_id: String,
    /// `h x w x c`.
    pub feature_map: Array3<f32>,
    pub input_id: String,
}

fn check_layers(state: &NetworkState, layer_ids: &[&str]) -> Result<()> {
    let valid = state.layer_ids();
    for id in layer_ids {
        if !valid.iter().any(|v| v == id) {
            return Err(Error::LayerNotFound {
                requested: id.to_string(),
                valid: valid.join(", "),
            });
        }
    }
    Ok(())
}

/// Captures the requested layers' outputs in one inference pass. Traces
/// come back in request order.
pub fn capture_activations(
    state: &NetworkState,
    image: ArrayView3<'_, f32>,
    input_id: &str,
    layer_ids: &[&str],
) -> Result<Vec<ActivationTrace>> {
    capture_with_prediction(state, image, input_id, layer_ids).map(|(_, traces)| traces)
}

/// As [`capture_activations`], also returning the prediction computed by the
/// same observed pass.
pub fn capture_with_prediction(
    state: &NetworkState,
    image: ArrayView3<'_, f32>,
    input_id: &str,
    layer_ids: &[&str],
) -> Result<(Prediction, Vec<ActivationTrace>)> {
    check_layers(state, layer_ids)?;
    state.check_input(image.shape())?;
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("input image contains non-finite values".into()));
    }
    let mut captured: Vec<Option<Array3<f32>>> = vec![None; layer_ids.len()];
    let mut observe = |id: &str, map: &FeatureMap| {
        for (slot, want) in captured.iter_mut().zip(layer_ids) {
            if *want == id {
                *slot = Some(map.to_array());
            }
        }
    };
    let (features, _) = state
        .backbone
        .forward(NetworkState::feature_map(image), None, Some(&mut observe));
    let logits = head_forward(state.head.weights_f32(), features, 1, None).logits;
    let logits: Vec<f64> = logits.iter().map(|v| f64::from(*v)).collect();
    let traces = captured
        .into_iter()
        .zip(layer_ids)
        .map(|(map, id)| ActivationTrace {
            layer_id: id.to_string(),
            feature_map: map.expect("every registered layer is observed"),
            input_id: input_id.to_string(),
        })
        .collect();
    Ok((Prediction::from_logits(&logits), traces))
}

/// Collapses the channel axis.
pub fn reduce(trace: &ActivationTrace, reduction: Reduction) -> Result<Array2<f64>> {
    let (h, w, c) = trace.feature_map.dim();
    if let Reduction::SingleChannel(i) = reduction {
        if i >= c {
            return Err(Error::Config(format!("channel {i} requested from a {c}-channel map")));
        }
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let px = trace.feature_map.slice(ndarray::s![y, x, ..]);
        match reduction {
            Reduction::ChannelMean => px.iter().map(|v| f64::from(*v)).sum::<f64>() / c as f64,
            Reduction::ChannelMax => px.iter().map(|v| f64::from(*v)).fold(f64::NEG_INFINITY, f64::max),
            Reduction::SingleChannel(i) => f64::from(px[i]),
        }
    }))
}

/// Min-max normalization onto `[0, 1]`; constant maps become all zeros.
pub fn normalize(map: &Array2<f64>) -> Array2<f64> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - min) / (max - min))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coords = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * input as f64 / out as f64 - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, fy) = ys[oy];
        let (x0, x1, fx) = xs[ox];
        let top = map[[y0, x0]] + (map[[y0, x1]] - map[[y0, x0]]) * fx;
        let bottom = map[[y1, x0]] + (map[[y1, x1]] - map[[y1, x0]]) * fx;
        top + (bottom - top) * fy
    })
}

/// Normalized, upsampled heat in `[0, 1]` at `out_h x out_w`.
pub fn heat_layer(reduced: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    upsample(&normalize(reduced), out_h, out_w)
}

/// Display intensities of a preprocessed image: channel mean, min-max
/// normalized.
fn grayscale(image: ArrayView3<'_, f32>) -> Array2<f64> {
    let (h, w, c) = image.dim();
    let mean = Array2::from_shape_fn((h, w), |(y, x)| {
        image.slice(ndarray::s![y, x, ..]).iter().map(|v| f64::from(*v)).sum::<f64>() / c as f64
    });
    normalize(&mean)
}

/// Blends heat over the grayscale image with opacity `OVERLAY_ALPHA * heat`,
/// so zero heat leaves the original untouched.
pub fn blend_overlay(image: ArrayView3<'_, f32>, heat: &Array2<f64>) -> RgbImage {
    let gray = grayscale(image);
    let (h, w) = gray.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let g = gray[[y, x]] * 255.0;
        let t = heat[[y, x]];
        let color = heat_color(t);
        let alpha = OVERLAY_ALPHA * t;
        Rgb(color.map(|c| ((1.0 - alpha) * g + alpha * c as f64).round().clamp(0.0, 255.0) as u8))
    })
}

/// File stem for an overlay: `<sample_id>__<layer_id>__<reduction>`, with
/// path separators in the sample id replaced by `_`.
pub fn overlay_stem(sample_id: &str, layer_id: &str, reduction: Reduction) -> String {
    let id = sample_id.replace(['/', '\\'], "_");
    format!("{id}__{layer_id}__{reduction}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayFiles {
    pub png: PathBuf,
    pub csv: PathBuf,
}

/// Writes the overlay PNG and the raw reduced map (one CSV line per map
/// row) into `output_dir`.
pub fn render_overlay(
    trace: &ActivationTrace,
    original: ArrayView3<'_, f32>,
    reduction: Reduction,
    output_dir: &Path,
) -> Result<OverlayFiles> {
    let reduced = reduce(trace, reduction)?;
    let (h, w, _) = original.dim();
    let heat = heat_layer(&reduced, h, w);
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let stem = overlay_stem(&trace.input_id, &trace.layer_id, reduction);
    let png = output_dir.join(format!("{stem}.png"));
    let csv = output_dir.join(format!("{stem}.csv"));
    blend_overlay(original, &heat).save(&png).map_err(|e| Error::Image {
        path: png.clone(),
        source: e,
    })?;
    write_map_csv(&reduced, &csv)?;
    Ok(OverlayFiles { png, csv })
}

pub fn write_map_csv(map: &Array2<f64>, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    for row in map.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_map_csv(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let row = record
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::InvalidImage(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Shape(format!("{} has ragged rows", path.display())));
    }
    Array2::from_shape_vec((rows.len(), w), rows.concat()).map_err(|e| Error::Shape(e.to_string()))
}

/// Mean heat over foreground pixels and over background pixels.
pub fn foreground_contrast(heat: &Array2<f64>, foreground: &[bool]) -> Option<(f64, f64)> {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (h, fg) in heat.iter().zip(foreground) {
        let i = usize::from(*fg);
        sums[i] += h;
        counts[i] += 1;
    }
    (counts[0] > 0 && counts[1] > 0).then(|| (sums[1] / counts[1] as f64, sums[0] / counts[0] as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivation {
    pub class: String,
    pub sample_ids: Vec<String>,
    /// Mean of the channel-mean maps of the sampled images.
    pub mean_map: Array2<f64>,
    /// Spatial mean of `mean_map`.
    pub energy: f64,
}

/// Per-class mean channel-mean activation at `layer_id` over
/// `samples_per_class` images per class, chosen by seeded hash order.
#[allow(clippy::too_many_arguments)]
pub fn class_activation_summary(
    state: &NetworkState,
    manifest: &DatasetManifest,
    split: Split,
    layer_id: &str,
    samples_per_class: usize,
    preprocess: &PreprocessSpec,
    seed: u64,
) -> Result<Vec<ClassActivation>> {
    check_layers(state, &[layer_id])?;
    if samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be at least 1".into()));
    }
    let sampling = derive_seed(seed, labels::SAMPLING);
    let mut out = Vec::new();
    for (class, name) in manifest.taxonomy.class_names().iter().enumerate() {
        let mut pool: Vec<_> = manifest.samples_in(split).filter(|s| s.label_index == class).collect();
        if pool.len() < samples_per_class {
            return Err(Error::Split(format!(
                "class `{name}` has {} samples in the {split} split, {samples_per_class} requested",
                pool.len()
            )));
        }
        pool.sort_by(|a, b| {
            unit_hash(sampling, &a.id)
                .total_cmp(&unit_hash(sampling, &b.id))
                .then_with(|| a.id.cmp(&b.id))
        });
        pool.truncate(samples_per_class);
        let images = load_images(manifest, &pool, preprocess)?;
        let mut sum: Option<Array2<f64>> = None;
        for (img, sample) in images.iter().zip(&pool) {
            let trace = capture_activations(state, img.view(), &sample.id, &[layer_id])?.remove(0);
            let reduced = reduce(&trace, Reduction::ChannelMean)?;
            sum = Some(match sum {
                Some(s) => s + &reduced,
                None => reduced,
            });
        }
        let mean_map = sum.expect("at least one sample") / samples_per_class as f64;
        let energy = mean_map.mean().unwrap_or(0.0);
        out.push(ClassActivation {
            class: name.clone(),
            sample_ids: pool.iter().map(|s| s.id.clone()).collect(),
            mean_map,
            energy,
        });
    }
    Ok(out)
}

pub const SUMMARY_CSV: &str = "class_activation_summary.csv";

/// Writes one heat image per class (`summary__<class>__<layer>.png`, at
/// `size x size`) and a CSV of per-class energies. Returns the paths.
pub fn write_class_summary(summary: &[ClassActivation], layer_id: &str, size: usize, output_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut paths = Vec::new();
    for class in summary {
        let heat = heat_layer(&class.mean_map, size, size);
        let img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
            Rgb(heat_color(heat[[y as usize, x as usize]]))
        });
        let path = output_dir.join(format!("summary__{}__{layer_id}.png", class.class));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        paths.push(path);
    }
    let csv_path = output_dir.join(SUMMARY_CSV);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&csv_path)
        .map_err(|e| Error::csv(&csv_path, e))?;
    w.write_record(["class", "layer", "samples", "energy"])
        .map_err(|e| Error::csv(&csv_path, e))?;
    for class in summary {
        w.write_record([
            class.class.as_str(),
            layer_id,
            &class.sample_ids.len().to_string(),
            &class.energy.to_string(),
        ])
        .map_err(|e| Error::csv(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    paths.push(csv_path);
    Ok(paths)
}

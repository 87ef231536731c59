//! Dataset ingestion, splitting, and preprocessing.
//!
//! A dataset on disk is a directory with one subdirectory per class:
//!
//! ```text
//! root/
//!   neuron_like/
//!     img_0000.png
//!   astrocyte_like/
//!     img_0000.png
//! ```
//!
//! Samples are identified by `<class>/<file stem>`. Split assignment is a
//! per-class ranking by a keyed hash of the sample id, so it is stable across
//! runs and platforms and needs no shuffled index list.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::unit_hash;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff"];

/// Channel statistics of the natural-image corpus the pretrained backbone
/// was fit on, for inputs scaled to `[0, 1]`.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxonomyMode {
    Binary,
    Multiclass,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFields {
    mode: TaxonomyMode,
    class_names: Vec<String>,
}

/// Ordered class names plus the task mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFields")]
pub struct LabelTaxonomy {
    mode: TaxonomyMode,
    class_names: Vec<String>,
}

impl TryFrom<TaxonomyFields> for LabelTaxonomy {
    type Error = Error;

    fn try_from(fields: TaxonomyFields) -> Result<Self> {
        LabelTaxonomy::new(fields.mode, fields.class_names)
    }
}

impl LabelTaxonomy {
    pub fn new<S: Into<String>>(mode: TaxonomyMode, names: impl IntoIterator<Item = S>) -> Result<Self> {
        let class_names: Vec<String> = names.into_iter().map(Into::into).collect();
        if class_names.iter().any(|n| n.trim().is_empty()) {
            return Err(Error::Config("class names must be nonempty".into()));
        }
        for (i, name) in class_names.iter().enumerate() {
            if class_names[..i].contains(name) {
                return Err(Error::Config(format!("duplicate class name `{name}`")));
            }
            if name.contains(['/', '\\', ',']) {
                return Err(Error::Config(format!(
                    "class name `{name}` contains a path separator or comma"
                )));
            }
        }
        match (mode, class_names.len()) {
            (TaxonomyMode::Binary, 2) => {}
            (TaxonomyMode::Binary, n) => return Err(Error::Config(format!("binary taxonomy needs exactly 2 classes, got {n}"))),
            (TaxonomyMode::Multiclass, n) if n >= 3 => {}
            (TaxonomyMode::Multiclass, n) => {
                return Err(Error::Config(format!(
                    "multiclass taxonomy needs at least 3 classes, got {n}"
                )))
            }
        }
        Ok(LabelTaxonomy { mode, class_names })
    }

    pub fn binary(negative: &str, positive: &str) -> Result<Self> {
        Self::new(TaxonomyMode::Binary, [negative, positive])
    }

    pub fn multiclass<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(TaxonomyMode::Multiclass, names)
    }

    pub fn mode(&self) -> TaxonomyMode {
        self.mode
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Result<&str> {
        self.class_names.get(index).map(String::as_str).ok_or(Error::LabelRange {
            index,
            class_count: self.class_count(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`; expected train, val or test"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSample {
    pub id: String,
    /// Relative to the manifest root.
    pub source_path: PathBuf,
    pub label_index: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    /// 80/20 outer split with the 80% further divided 80/20 into train/val.
    fn default() -> Self {
        SplitFractions {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let fractions = SplitFractions { train, val, test };
        fractions.validate()?;
        Ok(fractions)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be finite and nonnegative: {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn get(&self, split: Split) -> f64 {
        self.as_array()[split.index()]
    }

    /// Per-split quota for a class of `n` samples: differences of the rounded
    /// cumulative boundaries, then at least one sample for every split with a
    /// nonzero fraction (taken from the largest split).
    pub fn quotas(&self, n: usize) -> Option<[usize; 3]> {
        let f = self.as_array();
        let required = f.iter().filter(|x| **x > 0.0).count();
        if n < required {
            return None;
        }
        let b0 = ((f[0] * n as f64).round() as usize).min(n);
        let b1 = (((f[0] + f[1]) * n as f64).round() as usize).clamp(b0, n);
        let mut counts = [b0, b1 - b0, n - b1];
        for s in 0..3 {
            if f[s] > 0.0 && counts[s] == 0 {
                let donor = (0..3)
                    .filter(|&d| counts[d] > 1)
                    .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))?;
                counts[donor] -= 1;
                counts[s] += 1;
            }
        }
        Some(counts)
    }
}

/// A file that looked like an image but could not be decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub taxonomy: LabelTaxonomy,
    pub samples: Vec<ImageSample>,
    pub split_fractions: SplitFractions,
    pub seed: u64,
    /// Undecodable files skipped during ingestion. A warning is logged
    /// whenever this is nonempty.
    pub rejected: Vec<RejectedFile>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.taxonomy.class_count()];
        for s in &self.samples {
            counts[s.label_index] += 1;
        }
        counts
    }

    /// `counts[class][split]`.
    pub fn split_counts(&self) -> Vec<[usize; 3]> {
        let mut counts = vec![[0usize; 3]; self.taxonomy.class_count()];
        for s in &self.samples {
            counts[s.label_index][s.split.index()] += 1;
        }
        counts
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn sample(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn path_of(&self, sample: &ImageSample) -> PathBuf {
        self.root.join(&sample.source_path)
    }

    /// Writes `id,path,class,label_index,split` with `/`-separated relative paths.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        writer
            .write_record(["id", "path", "class", "label_index", "split"])
            .map_err(|e| Error::csv(path, e))?;
        for s in &self.samples {
            let rel = portable_path(&s.source_path);
            let label = s.label_index.to_string();
            writer
                .write_record([
                    s.id.as_str(),
                    rel.as_str(),
                    self.taxonomy.name(s.label_index)?,
                    label.as_str(),
                    s.split.as_str(),
                ])
                .map_err(|e| Error::csv(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest CSV written by [`DatasetManifest::write_csv`]. Sample
    /// paths resolve against `root`.
    pub fn read_csv(
        path: &Path,
        root: &Path,
        taxonomy: &LabelTaxonomy,
        split_fractions: SplitFractions,
        seed: u64,
    ) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            path: String,
            class: String,
            label_index: usize,
            split: String,
        }
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut samples = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            let expected = taxonomy.name(row.label_index)?;
            if expected != row.class {
                return Err(Error::Config(format!(
                    "manifest row `{}` has class `{}` but label index {} names `{expected}`",
                    row.id, row.class, row.label_index
                )));
            }
            samples.push(ImageSample {
                id: row.id,
                source_path: PathBuf::from(row.path),
                label_index: row.label_index,
                split: row.split.parse()?,
            });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            taxonomy: taxonomy.clone(),
            samples,
            split_fractions,
            seed,
            rejected: Vec::new(),
        })
    }
}

fn portable_path(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Builds a manifest from `<root>/<class_name>/<file>` with every sample
/// marked `train` until [`split_dataset`] runs.
pub fn load_manifest(root: &Path, taxonomy: &LabelTaxonomy) -> Result<DatasetManifest> {
    let mut candidates: Vec<(PathBuf, usize)> = Vec::new();
    for (label, class) in taxonomy.class_names().iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::MissingClass(class.clone()));
        }
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_file() && is_image_file(&path) {
                candidates.push((path, label));
            }
        }
    }
    candidates.sort();

    let decoded: Vec<std::result::Result<(), String>> = candidates
        .par_iter()
        .map(|(path, _)| read_raw_image(path).map(|_| ()).map_err(|e| e.to_string()))
        .collect();

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for ((path, label), status) in candidates.into_iter().zip(decoded) {
        match status {
            Ok(()) => {
                let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                samples.push(ImageSample {
                    id: format!("{}/{stem}", taxonomy.class_names()[label]),
                    source_path: rel,
                    label_index: label,
                    split: Split::Train,
                });
            }
            Err(reason) => rejected.push(RejectedFile { path, reason }),
        }
    }

    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(dup) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!(
            "duplicate sample id `{}` (same file stem with different extensions)",
            dup[0]
        )));
    }

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        taxonomy: taxonomy.clone(),
        samples,
        split_fractions: SplitFractions::new(1.0, 0.0, 0.0)?,
        seed: 0,
        rejected,
    };
    for (class, count) in taxonomy.class_names().iter().zip(manifest.class_counts()) {
        if count == 0 {
            return Err(Error::EmptyClass(class.clone()));
        }
    }
    if !manifest.rejected.is_empty() {
        log::warn!(
            "{} file(s) under {} could not be decoded and were excluded: {}",
            manifest.rejected.len(),
            root.display(),
            manifest
                .rejected
                .iter()
                .map(|r| r.path.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    Ok(manifest)
}

/// Assigns splits per class: samples are ranked by `unit_hash(seed, id)`
/// (ties broken by id) and the ranking is cut at the class's quotas from
/// [`SplitFractions::quotas`].
pub fn split_dataset(manifest: &DatasetManifest, fractions: SplitFractions, seed: u64) -> Result<DatasetManifest> {
    fractions.validate()?;
    if manifest.is_empty() {
        return Err(Error::Split("cannot split an empty manifest".into()));
    }
    let k = manifest.taxonomy.class_count();
    let mut by_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); k];
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class[s.label_index].push((unit_hash(seed, &s.id), i));
    }

    let mut out = manifest.clone();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let quotas = fractions.quotas(members.len()).ok_or_else(|| Error::Stratification {
            class: manifest.taxonomy.class_names()[class].clone(),
            available: members.len(),
            required: fractions.as_array().iter().filter(|f| **f > 0.0).count(),
        })?;
        members.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| manifest.samples[a.1].id.cmp(&manifest.samples[b.1].id))
        });
        let mut rank = 0;
        for (split, quota) in Split::ALL.into_iter().zip(quotas) {
            for &(_, idx) in &members[rank..rank + quota] {
                out.samples[idx].split = split;
            }
            rank += quota;
        }
    }
    out.split_fractions = fractions;
    out.seed = seed;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    UnitInterval,
    PerChannelStandardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    pub target_height: usize,
    pub target_width: usize,
    pub channels: usize,
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channel_means: Vec<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channel_stds: Vec<f32>,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec::pretrained_rgb(224, 224)
    }
}

impl PreprocessSpec {
    pub fn unit_interval(height: usize, width: usize, channels: usize) -> Self {
        PreprocessSpec {
            target_height: height,
            target_width: width,
            channels,
            normalization: Normalization::UnitInterval,
            channel_means: Vec::new(),
            channel_stds: Vec::new(),
        }
    }

    /// RGB input standardized with the pretrained backbone's statistics.
    pub fn pretrained_rgb(height: usize, width: usize) -> Self {
        PreprocessSpec {
            target_height: height,
            target_width: width,
            channels: 3,
            normalization: Normalization::PerChannelStandardize,
            channel_means: IMAGENET_MEAN.to_vec(),
            channel_stds: IMAGENET_STD.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_height < 32 || self.target_width < 32 {
            return Err(Error::Config(format!(
                "target size {}x{} is below the 32x32 minimum",
                self.target_height, self.target_width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.normalization == Normalization::PerChannelStandardize {
            if self.channel_means.len() != self.channels || self.channel_stds.len() != self.channels {
                return Err(Error::Config(format!(
                    "standardization needs {} channel means and stds",
                    self.channels
                )));
            }
            if self.channel_stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::Config("channel stds must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.target_height, self.target_width, self.channels]
    }
}

/// 8-bit image in row-major HWC order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        Ok(RawImage {
            height,
            width,
            channels,
            pixels,
        })
    }
}

/// Decodes an image file. Grayscale files (any bit depth) yield one channel,
/// everything else is converted to 8-bit RGB.
pub fn read_raw_image(path: &Path) -> Result<RawImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    let grayscale = !img.color().has_color();
    let (width, height) = (img.width() as usize, img.height() as usize);
    if grayscale {
        RawImage::new(height, width, 1, img.into_luma8().into_raw())
    } else {
        RawImage::new(height, width, 3, img.into_rgb8().into_raw())
    }
}

/// Bilinear resize of an HWC buffer with corner-aligned sampling: output
/// corners sample input corners exactly, and equal sizes reproduce the input.
pub fn resize_bilinear(src: &[f32], height: usize, width: usize, channels: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), height * width * channels);
    let coords = |out: usize, input: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let pos = if out == 1 || input == 1 {
                    0.0
                } else {
                    i as f64 * (input - 1) as f64 / (out - 1) as f64
                };
                let lo = (pos.floor() as usize).min(input - 1);
                let hi = (lo + 1).min(input - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = coords(out_h, height);
    let xs = coords(out_w, width);
    let mut out = vec![0.0f32; out_h * out_w * channels];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * width + x) * channels + c];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out[(oy * out_w + ox) * channels + c] = top + (bottom - top) * fy;
            }
        }
    }
    out
}

/// Resizes, adapts channel count, and normalizes one image into an
/// `H x W x C` array.
pub fn preprocess_image(raw: &RawImage, spec: &PreprocessSpec) -> Result<Array3<f32>> {
    if raw.height == 0 || raw.width == 0 {
        return Err(Error::InvalidImage(format!("zero-area image ({}x{})", raw.height, raw.width)));
    }
    if raw.channels != 1 && raw.channels != 3 {
        return Err(Error::InvalidImage(format!("unsupported channel count {}", raw.channels)));
    }
    let pixels = raw.height * raw.width;
    let converted: Vec<f32> = match (raw.channels, spec.channels) {
        (1, 3) => raw.pixels.iter().flat_map(|&v| [v as f32; 3]).collect(),
        (3, 1) => raw
            .pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect(),
        _ => raw.pixels.iter().map(|&v| v as f32).collect(),
    };
    debug_assert_eq!(converted.len(), pixels * spec.channels);
    let mut resized = resize_bilinear(
        &converted,
        raw.height,
        raw.width,
        spec.channels,
        spec.target_height,
        spec.target_width,
    );
    match spec.normalization {
        Normalization::UnitInterval => resized.iter_mut().for_each(|v| *v /= 255.0),
        Normalization::PerChannelStandardize => {
            for px in resized.chunks_exact_mut(spec.channels) {
                for (c, v) in px.iter_mut().enumerate() {
                    *v = (*v / 255.0 - spec.channel_means[c]) / spec.channel_stds[c];
                }
            }
        }
    }
    if resized.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("preprocessing produced non-finite values".into()));
    }
    Array3::from_shape_vec((spec.target_height, spec.target_width, spec.channels), resized)
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Decodes and preprocesses every sample, in order. Runs on the current
/// rayon pool; results are independent of the thread count.
pub fn load_images(manifest: &DatasetManifest, samples: &[&ImageSample], spec: &PreprocessSpec) -> Result<Vec<Array3<f32>>> {
    samples
        .par_iter()
        .map(|s| preprocess_image(&read_raw_image(&manifest.path_of(s))?, spec))
        .collect()
}

/// One-hot rows for the samples' labels.
pub fn encode_labels(samples: &[ImageSample], taxonomy: &LabelTaxonomy) -> Result<Array2<f64>> {
    let indices: Vec<usize> = samples.iter().map(|s| s.label_index).collect();
    one_hot(&indices, taxonomy.class_count())
}

pub fn one_hot(labels: &[usize], class_count: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), class_count));
    for (row, &label) in labels.iter().enumerate() {
        if label >= class_count {
            return Err(Error::LabelRange {
                index: label,
                class_count,
            });
        }
        out[[row, label]] = 1.0;
    }
    Ok(out)
}

//! Procedural phase-contrast-like cell images.
//!
//! Each image holds one bright cell on a dim textured background. Four
//! archetypes encode the morphology classes:
//!
//! | archetype              | soma        | processes                         | filopodia |
//! |------------------------|-------------|-----------------------------------|-----------|
//! | `nsc_like`             | small       | none                              | none      |
//! | `neuron_like`          | small       | 3-6 long, thin, uniform length    | none      |
//! | `astrocyte_like`       | large       | 5-8 short, thick, variable length | dense     |
//! | `oligodendrocyte_like` | large       | at most one, short                | none      |
//!
//! All geometric quantities below are given for a 64 px canvas and scale
//! linearly with `image_size`. None of these numbers is measured from real
//! cells; they are chosen so the classes are visually distinct (`easy`) or
//! overlap in roughly a third of their parameter ranges (`hard`).
//!
//! Every image draws from its own stream seeded by
//! `derive_seed(spec.seed, id)`, so generation is order independent.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::GrayImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ImageSample, LabelTaxonomy, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    NscLike,
    NeuronLike,
    AstrocyteLike,
    OligodendrocyteLike,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::NscLike,
        Archetype::NeuronLike,
        Archetype::AstrocyteLike,
        Archetype::OligodendrocyteLike,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::NscLike => "nsc_like",
            Archetype::NeuronLike => "neuron_like",
            Archetype::AstrocyteLike => "astrocyte_like",
            Archetype::OligodendrocyteLike => "oligodendrocyte_like",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Archetype(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    #[default]
    Easy,
    Hard,
}

/// Geometry and appearance of one rendered cell. Lengths are in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologyParams {
    pub class_label: usize,
    pub archetype: Archetype,
    pub soma_radius: f64,
    pub soma_intensity: f64,
    pub process_count: usize,
    pub process_length_mean: f64,
    pub process_length_std: f64,
    pub process_width: f64,
    pub branching_prob: f64,
    pub filopodia_density: f64,
    pub texture_noise_sigma: f64,
    pub background_level: f64,
}

impl MorphologyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [("soma_radius", self.soma_radius), ("process_width", self.process_width)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Geometry(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("process_length_mean", self.process_length_mean),
            ("process_length_std", self.process_length_std),
            ("texture_noise_sigma", self.texture_noise_sigma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Geometry(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let unit = [
            ("branching_prob", self.branching_prob),
            ("filopodia_density", self.filopodia_density),
            ("background_level", self.background_level),
            ("soma_intensity", self.soma_intensity),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Geometry(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws class-conditional parameters for a cell on a canvas of
/// `image_size` pixels.
pub fn sample_morphology(
    class_label: usize,
    archetype: Archetype,
    difficulty: Difficulty,
    image_size: usize,
    rng: &mut Stream,
) -> MorphologyParams {
    let s = image_size as f64 / 64.0;
    let hard = difficulty == Difficulty::Hard;
    let (noise, bg) = if hard {
        (0.07, uniform(rng, 0.12, 0.30))
    } else {
        (0.03, uniform(rng, 0.15, 0.25))
    };
    let soma_intensity = uniform(rng, 0.75, 0.85);
    let base = MorphologyParams {
        class_label,
        archetype,
        soma_radius: 0.0,
        soma_intensity,
        process_count: 0,
        process_length_mean: 0.0,
        process_length_std: 0.0,
        process_width: 1.0 * s,
        branching_prob: 0.0,
        filopodia_density: 0.0,
        texture_noise_sigma: noise,
        background_level: bg,
    };
    match archetype {
        Archetype::NscLike => MorphologyParams {
            soma_radius: if hard {
                uniform(rng, 4.5, 6.0)
            } else {
                uniform(rng, 3.5, 4.2)
            } * s,
            ..base
        },
        Archetype::NeuronLike => {
            let length = if hard {
                uniform(rng, 11.0, 20.0)
            } else {
                uniform(rng, 16.0, 20.0)
            } * s;
            MorphologyParams {
                soma_radius: if hard {
                    uniform(rng, 4.5, 6.0)
                } else {
                    uniform(rng, 4.6, 5.2)
                } * s,
                process_count: rng.random_range(3..=6),
                process_length_mean: length,
                process_length_std: length * if hard { 0.15 } else { 0.08 },
                process_width: if hard {
                    uniform(rng, 1.2, 2.3)
                } else {
                    uniform(rng, 1.2, 1.6)
                } * s,
                branching_prob: 0.3,
                ..base
            }
        }
        Archetype::AstrocyteLike => {
            let length = if hard {
                uniform(rng, 7.0, 14.0)
            } else {
                uniform(rng, 7.0, 10.0)
            } * s;
            MorphologyParams {
                soma_radius: if hard {
                    uniform(rng, 5.5, 7.5)
                } else {
                    uniform(rng, 7.2, 8.0)
                } * s,
                process_count: if hard {
                    rng.random_range(3..=8)
                } else {
                    rng.random_range(5..=8)
                },
                process_length_mean: length,
                process_length_std: length * 0.45,
                process_width: if hard {
                    uniform(rng, 1.6, 3.0)
                } else {
                    uniform(rng, 2.2, 3.0)
                } * s,
                branching_prob: 0.1,
                filopodia_density: if hard {
                    uniform(rng, 0.5, 0.7)
                } else {
                    uniform(rng, 0.5, 0.9)
                },
                ..base
            }
        }
        Archetype::OligodendrocyteLike => {
            let length = uniform(rng, 4.0, 7.0) * s;
            MorphologyParams {
                soma_radius: if hard {
                    uniform(rng, 5.8, 7.5)
                } else {
                    uniform(rng, 5.8, 6.5)
                } * s,
                process_count: rng.random_range(0..=1),
                process_length_mean: length,
                process_length_std: length * 0.2,
                process_width: uniform(rng, 1.0, 1.4) * s,
                ..base
            }
        }
    }
}

/// Per-pixel ground truth of a rendered cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum MaskLabel {
    Background = 0,
    Filopodium = 1,
    Process = 2,
    Soma = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedCell {
    pub size: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// Row-major ground-truth labels; a pixel is foreground when its shape
    /// coverage is at least one half.
    pub mask: Vec<MaskLabel>,
}

impl RenderedCell {
    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|m| **m != MaskLabel::Background).count()
    }

    /// 8-bit quantization, `round(v * 255)`.
    pub fn to_gray_image(&self) -> GrayImage {
        let bytes = self
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage::from_raw(self.size as u32, self.size as u32, bytes).expect("buffer matches size")
    }
}

struct Canvas {
    size: usize,
    coverage: Vec<f32>,
    intensity: Vec<f32>,
    mask: Vec<MaskLabel>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            coverage: vec![0.0; size * size],
            intensity: vec![0.0; size * size],
            mask: vec![MaskLabel::Background; size * size],
        }
    }

    fn stamp(&mut self, idx: usize, cov: f32, intensity: f32, label: MaskLabel) {
        if cov > self.coverage[idx] {
            self.coverage[idx] = cov;
            self.intensity[idx] = intensity;
        }
        if cov >= 0.5 && label > self.mask[idx] {
            self.mask[idx] = label;
        }
    }

    /// Hard-edged disk: pixels whose center lies within `radius`.
    fn disk(&mut self, cx: f64, cy: f64, radius: f64, intensity: f32) {
        let (x0, x1, y0, y1) = self.bounds(cx, cy, cx, cy, radius + 1.0);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= radius * radius {
                    let idx = y * self.size + x;
                    self.stamp(idx, 1.0, intensity, MaskLabel::Soma);
                }
            }
        }
    }

    /// Anti-aliased thick segment: coverage falls off linearly over one pixel
    /// around the stroke edge.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), width: f64, intensity: f32, label: MaskLabel) {
        let half = width / 2.0;
        let (x0, x1, y0, y1) = self.bounds(a.0, a.1, b.0, b.1, half + 1.0);
        let (vx, vy) = (b.0 - a.0, b.1 - a.1);
        let len2 = vx * vx + vy * vy;
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (dx, dy) = (px - (a.0 + t * vx), py - (a.1 + t * vy));
                let dist = (dx * dx + dy * dy).sqrt();
                let cov = (half + 0.5 - dist).clamp(0.0, 1.0) as f32;
                if cov > 0.0 {
                    let idx = y * self.size + x;
                    self.stamp(idx, cov, intensity, label);
                }
            }
        }
    }

    fn bounds(&self, ax: f64, ay: f64, bx: f64, by: f64, pad: f64) -> (usize, usize, usize, usize) {
        let clamp = |v: f64| v.clamp(0.0, self.size as f64) as usize;
        (
            clamp(ax.min(bx) - pad).min(self.size),
            clamp((ax.max(bx) + pad).ceil()),
            clamp(ay.min(by) - pad).min(self.size),
            clamp((ay.max(by) + pad).ceil()),
        )
    }
}

/// Rasterizes one cell. Deterministic given `(params, image_size, rng state)`.
pub fn render_cell(params: &MorphologyParams, image_size: usize, rng: &mut Stream) -> Result<RenderedCell> {
    params.validate()?;
    if image_size < 8 {
        return Err(Error::Geometry(format!("image size {image_size} is too small")));
    }
    let half = image_size as f64 / 2.0;
    if params.soma_radius >= half {
        return Err(Error::Geometry(format!(
            "soma radius {} does not fit a {image_size} px canvas",
            params.soma_radius
        )));
    }
    let scale = image_size as f64 / 64.0;

    // Keep the soma at least soma_radius + 2 * mean process length from the
    // border where the canvas allows it; otherwise pin it to the center.
    let margin = (params.soma_radius + 2.0 * params.process_length_mean).min(half);
    let jitter = (half - margin).clamp(0.0, 2.0 * scale);
    let cx = half + uniform(rng, -jitter, jitter);
    let cy = half + uniform(rng, -jitter, jitter);

    let mut canvas = Canvas::new(image_size);
    let soma = params.soma_intensity as f32;
    let arm = (0.9 * params.soma_intensity) as f32;
    canvas.disk(cx, cy, params.soma_radius, soma);

    let length_noise = Normal::new(params.process_length_mean, params.process_length_std.max(1e-9))
        .map_err(|e| Error::Geometry(e.to_string()))?;
    let phase = uniform(rng, 0.0, 2.0 * PI);
    let n = params.process_count;
    for i in 0..n {
        let angle = phase + 2.0 * PI * i as f64 / n as f64 + uniform(rng, -0.25, 0.25);
        let length = length_noise.sample(rng).max(1.0 * scale);
        let start = (
            cx + params.soma_radius * 0.8 * angle.cos(),
            cy + params.soma_radius * 0.8 * angle.sin(),
        );
        let mut heading = angle;
        let mut point = start;
        let pieces = 3;
        for piece in 0..pieces {
            heading += uniform(rng, -0.2, 0.2);
            let step = length / pieces as f64;
            let next = (point.0 + step * heading.cos(), point.1 + step * heading.sin());
            canvas.segment(point, next, params.process_width, arm, MaskLabel::Process);
            if piece == 1 && rng.random_bool(params.branching_prob) {
                let side = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
                let branch = heading + side;
                let blen = 0.5 * length;
                let tip = (next.0 + blen * branch.cos(), next.1 + blen * branch.sin());
                canvas.segment(next, tip, params.process_width * 0.8, arm, MaskLabel::Process);
            }
            point = next;
        }
    }

    let perimeter = 2.0 * PI * params.soma_radius;
    let spikes = (params.filopodia_density * perimeter / (1.5 * scale)).round() as usize;
    for _ in 0..spikes {
        let angle = uniform(rng, 0.0, 2.0 * PI);
        let length = uniform(rng, 2.0, 4.0) * scale;
        let r0 = params.soma_radius - 0.5;
        let a = (cx + r0 * angle.cos(), cy + r0 * angle.sin());
        let b = (cx + (r0 + length) * angle.cos(), cy + (r0 + length) * angle.sin());
        canvas.segment(a, b, 0.8 * scale, arm, MaskLabel::Filopodium);
    }

    let bg = params.background_level as f32;
    let noise = if params.texture_noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.texture_noise_sigma).map_err(|e| Error::Geometry(e.to_string()))?)
    } else {
        None
    };
    let pixels = canvas
        .coverage
        .iter()
        .zip(&canvas.intensity)
        .map(|(&cov, &fg)| {
            let mut v = if cov == 0.0 {
                bg
            } else if cov == 1.0 {
                fg
            } else {
                bg + (fg - bg) * cov
            };
            if let Some(dist) = &noise {
                v += dist.sample(rng) as f32;
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok(RenderedCell {
        size: image_size,
        pixels,
        mask: canvas.mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub taxonomy: LabelTaxonomy,
    /// Archetype rendered for each class, in taxonomy order.
    pub archetypes: Vec<Archetype>,
    pub per_class_count: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub difficulty: Difficulty,
}

impl SyntheticSpec {
    /// Four-class spec whose class names are the archetype names.
    pub fn four_class(per_class_count: usize, image_size: usize, seed: u64, difficulty: Difficulty) -> Self {
        let names: Vec<&str> = Archetype::ALL.iter().map(|a| a.as_str()).collect();
        SyntheticSpec {
            taxonomy: LabelTaxonomy::multiclass(names).expect("four distinct names"),
            archetypes: Archetype::ALL.to_vec(),
            per_class_count,
            image_size,
            seed,
            difficulty,
        }
    }

    /// Maps each class name to the archetype of the same name.
    pub fn archetypes_by_name(taxonomy: &LabelTaxonomy) -> Result<Vec<Archetype>> {
        taxonomy.class_names().iter().map(|n| n.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class_count < 1 {
            return Err(Error::Config("per_class_count must be at least 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if self.archetypes.len() != self.taxonomy.class_count() {
            return Err(Error::Config(format!(
                "{} archetypes for {} classes",
                self.archetypes.len(),
                self.taxonomy.class_count()
            )));
        }
        Ok(())
    }

    pub fn sample_id(&self, class: usize, index: usize) -> String {
        format!("{}/img_{index:05}", self.taxonomy.class_names()[class])
    }

    pub fn image_seed(&self, id: &str) -> u64 {
        derive_seed(self.seed, id)
    }

    /// Regenerates one image (and its ground-truth mask) from a log record.
    pub fn render(&self, class: usize, image_seed: u64) -> Result<(MorphologyParams, RenderedCell)> {
        let archetype = *self.archetypes.get(class).ok_or(Error::LabelRange {
            index: class,
            class_count: self.archetypes.len(),
        })?;
        let mut rng = stream(image_seed);
        let params = sample_morphology(class, archetype, self.difficulty, self.image_size, &mut rng);
        let cell = render_cell(&params, self.image_size, &mut rng)?;
        Ok((params, cell))
    }
}

/// One row of the generation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub class: String,
    pub seed: u64,
    pub soma_radius: f64,
    pub process_count: usize,
    pub process_length_mean: f64,
    pub filopodia_density: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest: DatasetManifest,
    pub log: Vec<GenerationRecord>,
    pub files: Vec<PathBuf>,
}

pub const GENERATION_LOG: &str = "generation_log.csv";

/// Renders `per_class_count` images per class into
/// `<output>/<class>/img_NNNNN.png` and writes `<output>/generation_log.csv`.
pub fn generate_dataset(spec: &SyntheticSpec, output: &Path) -> Result<GeneratedDataset> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.taxonomy.class_count())
        .flat_map(|c| (0..spec.per_class_count).map(move |i| (c, i)))
        .collect();
    for class in spec.taxonomy.class_names() {
        let dir = output.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut results: Vec<(ImageSample, GenerationRecord, PathBuf)> = jobs
        .par_iter()
        .map(|&(class, index)| {
            let id = spec.sample_id(class, index);
            let seed = spec.image_seed(&id);
            let (params, cell) = spec.render(class, seed)?;
            let rel = PathBuf::from(spec.taxonomy.class_names()[class].as_str()).join(format!("img_{index:05}.png"));
            let path = output.join(&rel);
            cell.to_gray_image().save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?;
            let record = GenerationRecord {
                id: id.clone(),
                class: spec.taxonomy.class_names()[class].clone(),
                seed,
                soma_radius: params.soma_radius,
                process_count: params.process_count,
                process_length_mean: params.process_length_mean,
                filopodia_density: params.filopodia_density,
            };
            let sample = ImageSample {
                id,
                source_path: rel,
                label_index: class,
                split: Split::Train,
            };
            Ok((sample, record, path))
        })
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| a.2.cmp(&b.2));

    let log_path = output.join(GENERATION_LOG);
    write_generation_log(&log_path, results.iter().map(|r| &r.1))?;

    let mut samples = Vec::with_capacity(results.len());
    let mut log = Vec::with_capacity(results.len());
    let mut files = Vec::with_capacity(results.len() + 1);
    for (sample, record, path) in results {
        samples.push(sample);
        log.push(record);
        files.push(path);
    }
    files.push(log_path);
    Ok(GeneratedDataset {
        manifest: DatasetManifest {
            root: output.to_path_buf(),
            taxonomy: spec.taxonomy.clone(),
            samples,
            split_fractions: SplitFractions::new(1.0, 0.0, 0.0)?,
            seed: 0,
            rejected: Vec::new(),
        },
        log,
        files,
    })
}

fn write_generation_log<'a>(path: &Path, records: impl Iterator<Item = &'a GenerationRecord>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    for record in records {
        writer.serialize(record).map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_generation_log(path: &Path) -> Result<Vec<GenerationRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| Error::csv(path, e))).collect()
}

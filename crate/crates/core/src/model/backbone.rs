//! Convolutional feature extractors.
//!
//! `small_cnn`: three 3x3 stride-2 convolutions (16, 32, 64 channels, ReLU),
//! so a 64x64 input leaves an 8x8x64 map. `resnet50`: the standard 50-layer
//! bottleneck network (stages of 3, 4, 6, 3 blocks, stride on the 3x3
//! convolution) ending in 2048 channels. Both are followed by global average
//! pooling, registered as layer `gap`.
//!
//! Parameter names follow the common `layerN.B.convM` convention so that
//! converted pretrained weights can be matched by name.

use serde::{Deserialize, Serialize};

use super::layers::{backward_layers, BatchNorm, Conv2d, Gradients, Layer, MaxPool, Param, Residual, Trace};
use super::tensor::FeatureMap;
use crate::seed::Stream;

pub const GAP_LAYER: &str = "gap";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Resnet50,
    SmallCnn,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::SmallCnn => "small_cnn",
        }
    }

    pub fn feature_width(self) -> usize {
        match self {
            BackboneKind::Resnet50 => 2048,
            BackboneKind::SmallCnn => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub layers: Vec<Layer>,
}

pub(crate) struct BackboneTrace {
    layers: Vec<Trace>,
    final_shape: (usize, usize, usize),
}

impl Backbone {
    pub fn new(kind: BackboneKind, input_channels: usize, rng: &mut Stream) -> Self {
        let layers = match kind {
            BackboneKind::SmallCnn => small_cnn(input_channels, rng),
            BackboneKind::Resnet50 => resnet50(input_channels, rng),
        };
        Backbone { kind, layers }
    }

    pub fn feature_width(&self) -> usize {
        self.kind.feature_width()
    }

    /// Ids accepted by activation capture, in forward order.
    pub fn layer_ids(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|l| l.id().to_string())
            .chain(std::iter::once(GAP_LAYER.to_string()))
            .collect()
    }

    /// Output shape of each registered layer for the given input shape.
    pub fn layer_shapes(&self, input: (usize, usize, usize)) -> Option<Vec<(String, (usize, usize, usize))>> {
        let mut shape = input;
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            out.push((layer.id().to_string(), shape));
        }
        out.push((GAP_LAYER.to_string(), (1, 1, shape.2)));
        Some(out)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.layers.iter().for_each(|l| l.visit_params(&mut out));
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(&mut out));
        out
    }

    /// Runs the convolutional stack and pools. `observe` sees every
    /// registered layer's output, `gap` included, without altering it.
    pub(crate) fn forward(
        &self,
        input: FeatureMap,
        mut trace: Option<&mut Vec<Trace>>,
        mut observe: Option<&mut dyn FnMut(&str, &FeatureMap)>,
    ) -> (Vec<f32>, (usize, usize, usize)) {
        let mut x = input;
        for layer in &self.layers {
            x = layer.forward(x, trace.as_deref_mut());
            if let Some(f) = observe.as_deref_mut() {
                f(layer.id(), &x);
            }
        }
        let pooled = global_average_pool(&x);
        if let Some(f) = observe {
            f(
                GAP_LAYER,
                &FeatureMap {
                    h: 1,
                    w: 1,
                    c: x.c,
                    data: pooled.clone(),
                },
            );
        }
        (pooled, (x.h, x.w, x.c))
    }

    pub(crate) fn forward_traced(&self, input: FeatureMap) -> (Vec<f32>, BackboneTrace) {
        let mut layers = Vec::with_capacity(self.layers.len());
        let (features, final_shape) = self.forward(input, Some(&mut layers), None);
        (features, BackboneTrace { layers, final_shape })
    }

    /// Accumulates parameter gradients for one sample given the gradient of
    /// the pooled features.
    pub(crate) fn backward(&self, trace: BackboneTrace, dfeatures: &[f32], grads: &mut Gradients) {
        let (h, w, c) = trace.final_shape;
        let scale = 1.0 / (h * w) as f32;
        let mut dy = FeatureMap::zeros(h, w, c);
        for px in dy.data.chunks_exact_mut(c) {
            for (d, g) in px.iter_mut().zip(dfeatures) {
                *d = g * scale;
            }
        }
        backward_layers(&self.layers, trace.layers, dy, grads, false);
    }
}

/// Per-channel spatial mean.
pub fn global_average_pool(x: &FeatureMap) -> Vec<f32> {
    let mut sums = vec![0.0f64; x.c];
    for px in x.data.chunks_exact(x.c) {
        for (s, v) in sums.iter_mut().zip(px) {
            *s += *v as f64;
        }
    }
    let n = x.pixels() as f64;
    sums.into_iter().map(|s| (s / n) as f32).collect()
}

fn small_cnn(input_channels: usize, rng: &mut Stream) -> Vec<Layer> {
    let widths = [input_channels, 16, 32, 64];
    (0..3)
        .map(|i| {
            Layer::Conv(Conv2d::new(
                &format!("conv{}", i + 1),
                (widths[i], widths[i + 1]),
                (3, 2, 1),
                true,
                true,
                rng,
            ))
        })
        .collect()
}

fn conv_bn(
    prefix: &str,
    conv: &str,
    bn: &str,
    channels: (usize, usize),
    geometry: (usize, usize, usize),
    rng: &mut Stream,
) -> [Layer; 2] {
    [
        Layer::Conv(Conv2d::new(&format!("{prefix}{conv}"), channels, geometry, false, false, rng)),
        Layer::Norm(BatchNorm::new(&format!("{prefix}{bn}"), channels.1)),
    ]
}

fn bottleneck(id: &str, in_c: usize, width: usize, stride: usize, rng: &mut Stream) -> Layer {
    let out_c = width * 4;
    let p = format!("{id}.");
    let mut main = Vec::with_capacity(8);
    main.extend(conv_bn(&p, "conv1", "bn1", (in_c, width), (1, 1, 0), rng));
    main.push(Layer::Relu(format!("{p}relu1")));
    main.extend(conv_bn(&p, "conv2", "bn2", (width, width), (3, stride, 1), rng));
    main.push(Layer::Relu(format!("{p}relu2")));
    main.extend(conv_bn(&p, "conv3", "bn3", (width, out_c), (1, 1, 0), rng));
    let shortcut = if stride != 1 || in_c != out_c {
        conv_bn(&p, "downsample.0", "downsample.1", (in_c, out_c), (1, stride, 0), rng).to_vec()
    } else {
        Vec::new()
    };
    Layer::Residual(Residual {
        id: id.to_string(),
        main,
        shortcut,
    })
}

fn resnet50(input_channels: usize, rng: &mut Stream) -> Vec<Layer> {
    let mut layers = Vec::new();
    layers.extend(conv_bn("", "conv1", "bn1", (input_channels, 64), (7, 2, 3), rng));
    layers.push(Layer::Relu("relu".into()));
    layers.push(Layer::MaxPool(MaxPool {
        id: "maxpool".into(),
        kernel: 3,
        stride: 2,
        padding: 1,
    }));
    let mut in_c = 64;
    for (stage, (blocks, width)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            layers.push(bottleneck(&format!("layer{}.{b}", stage + 1), in_c, width, stride, rng));
            in_c = width * 4;
        }
    }
    layers
}

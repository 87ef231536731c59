//! Backbone layers with hand-written backward passes.
//!
//! Convolutions run as im2col followed by a single GEMM. Weights are stored
//! as `(ky, kx, c_in) x c_out` row-major matrices so the product of the
//! patch matrix and the weight matrix lands directly in HWC order.

use std::borrow::Cow;

use rand::Rng;

use super::tensor::{FeatureMap, Real};
use crate::seed::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    /// Running statistics are stored and checkpointed but never optimized.
    pub trainable: bool,
    pub(crate) slot: usize,
}

impl Param {
    pub(crate) fn new(name: String, shape: Vec<usize>, value: Vec<f32>, trainable: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Param {
            name,
            shape,
            value,
            trainable,
            slot: usize::MAX,
        }
    }

    pub(crate) fn uniform(name: String, shape: Vec<usize>, limit: f32, rng: &mut Stream) -> Self {
        let len = shape.iter().product();
        let value = (0..len).map(|_| rng.random_range(-limit..=limit)).collect();
        Param::new(name, shape, value, true)
    }

    pub(crate) fn filled(name: String, shape: Vec<usize>, fill: f32, trainable: bool) -> Self {
        let len = shape.iter().product();
        Param::new(name, shape, vec![fill; len], trainable)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Gradient buffers indexed by parameter slot. Frozen slots stay empty.
#[derive(Debug, Clone)]
pub(crate) struct Gradients {
    pub tensors: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn slot_mut(&mut self, p: &Param) -> Option<&mut [f32]> {
        self.tensors.get_mut(p.slot).filter(|g| !g.is_empty()).map(Vec::as_mut_slice)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub id: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    /// ReLU fused onto the output.
    pub relu: bool,
}

impl Conv2d {
    pub(crate) fn new(
        id: &str,
        (in_channels, out_channels): (usize, usize),
        (kernel, stride, padding): (usize, usize, usize),
        bias: bool,
        relu: bool,
        rng: &mut Stream,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let limit = (6.0 / fan_in as f32).sqrt();
        Conv2d {
            id: id.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::uniform(format!("{id}.weight"), vec![fan_in, out_channels], limit, rng),
            bias: bias.then(|| Param::filled(format!("{id}.bias"), vec![out_channels], 0.0, true)),
            relu,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn im2col(&self, x: &FeatureMap, ho: usize, wo: usize) -> Vec<f32> {
        let (k, c) = (self.kernel, x.c);
        let row_len = self.patch_len();
        let mut cols = vec![0.0f32; ho * wo * row_len];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[(oy * wo + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let src = (iy as usize * x.w + ix as usize) * c;
                        row[(ky * k + kx) * c..][..c].copy_from_slice(&x.data[src..src + c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f32], h: usize, w: usize, ho: usize, wo: usize) -> FeatureMap {
        let (k, c) = (self.kernel, self.in_channels);
        let row_len = self.patch_len();
        let mut dx = FeatureMap::zeros(h, w, c);
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &dcols[(oy * wo + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * c;
                        for (d, s) in dx.data[dst..dst + c].iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
        dx
    }

    fn patches<'a>(&self, x: &'a FeatureMap, ho: usize, wo: usize) -> Cow<'a, [f32]> {
        if self.pointwise() {
            Cow::Borrowed(&x.data)
        } else {
            Cow::Owned(self.im2col(x, ho, wo))
        }
    }

    pub(crate) fn forward(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.c, self.in_channels, "{}: channel mismatch", self.id);
        let (ho, wo) = self.output_dims(x.h, x.w).expect("input smaller than kernel");
        let mut out = FeatureMap::zeros(ho, wo, self.out_channels);
        let beta = match &self.bias {
            Some(b) => {
                for row in out.data.chunks_exact_mut(self.out_channels) {
                    row.copy_from_slice(&b.value);
                }
                1.0
            }
            None => 0.0,
        };
        let cols = self.patches(x, ho, wo);
        f32::gemm(
            ho * wo,
            self.patch_len(),
            self.out_channels,
            &cols,
            false,
            &self.weight.value,
            false,
            beta,
            &mut out.data,
        );
        if self.relu {
            out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        out
    }

    pub(crate) fn backward(
        &self,
        input: &FeatureMap,
        output: Option<&FeatureMap>,
        mut dy: FeatureMap,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<FeatureMap> {
        if self.relu {
            let out = output.expect("fused relu keeps its output");
            for (d, y) in dy.data.iter_mut().zip(&out.data) {
                if *y <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let (ho, wo) = (dy.h, dy.w);
        let hw = ho * wo;
        let kk = self.patch_len();
        let oc = self.out_channels;
        let wants_weight = grads.slot_mut(&self.weight).is_some();
        if wants_weight {
            let cols = self.patches(input, ho, wo);
            let gw = grads.slot_mut(&self.weight).expect("checked");
            f32::gemm(kk, hw, oc, &cols, true, &dy.data, false, 1.0, gw);
        }
        if let Some(b) = &self.bias {
            if let Some(gb) = grads.slot_mut(b) {
                for row in dy.data.chunks_exact(oc) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += *d;
                    }
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0f32; hw * kk];
        f32::gemm(hw, oc, kk, &dy.data, false, &self.weight.value, true, 0.0, &mut dcols);
        if self.pointwise() {
            Some(FeatureMap {
                h: input.h,
                w: input.w,
                c: input.c,
                data: dcols,
            })
        } else {
            Some(self.col2im(&dcols, input.h, input.w, ho, wo))
        }
    }
}

/// Batch normalization with frozen running statistics: a per-channel affine
/// map with trainable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub id: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
}

impl BatchNorm {
    pub(crate) fn new(id: &str, channels: usize) -> Self {
        BatchNorm {
            id: id.to_string(),
            gamma: Param::filled(format!("{id}.gamma"), vec![channels], 1.0, true),
            beta: Param::filled(format!("{id}.beta"), vec![channels], 0.0, true),
            running_mean: Param::filled(format!("{id}.running_mean"), vec![channels], 0.0, false),
            running_var: Param::filled(format!("{id}.running_var"), vec![channels], 1.0, false),
            eps: 1e-5,
        }
    }

    fn inv_std(&self) -> Vec<f32> {
        self.running_var.value.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect()
    }

    pub(crate) fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let inv = self.inv_std();
        let mut out = x.clone();
        for px in out.data.chunks_exact_mut(x.c) {
            for (c, v) in px.iter_mut().enumerate() {
                *v = (*v - self.running_mean.value[c]) * inv[c] * self.gamma.value[c] + self.beta.value[c];
            }
        }
        out
    }

    pub(crate) fn backward(
        &self,
        input: &FeatureMap,
        dy: FeatureMap,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<FeatureMap> {
        let inv = self.inv_std();
        let c = input.c;
        if let Some(gg) = grads.slot_mut(&self.gamma) {
            for (px, d) in input.data.chunks_exact(c).zip(dy.data.chunks_exact(c)) {
                for ch in 0..c {
                    gg[ch] += d[ch] * (px[ch] - self.running_mean.value[ch]) * inv[ch];
                }
            }
        }
        if let Some(gb) = grads.slot_mut(&self.beta) {
            for d in dy.data.chunks_exact(c) {
                for ch in 0..c {
                    gb[ch] += d[ch];
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = dy;
        for d in dx.data.chunks_exact_mut(c) {
            for ch in 0..c {
                d[ch] *= inv[ch] * self.gamma.value[ch];
            }
        }
        Some(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub id: String,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool {
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn forward(&self, x: &FeatureMap) -> (FeatureMap, Vec<u32>) {
        let (ho, wo) = self.output_dims(x.h, x.w);
        let mut out = FeatureMap::zeros(ho, wo, x.c);
        let mut argmax = vec![0u32; ho * wo * x.c];
        for oy in 0..ho {
            for ox in 0..wo {
                for c in 0..x.c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = u32::MAX;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let idx = (iy as usize * x.w + ix as usize) * x.c + c;
                            if x.data[idx] > best || best_idx == u32::MAX {
                                best = x.data[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = (oy * wo + ox) * x.c + c;
                    out.data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        (out, argmax)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub id: String,
    pub main: Vec<Layer>,
    /// Empty for an identity shortcut.
    pub shortcut: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Norm(BatchNorm),
    Relu(String),
    MaxPool(MaxPool),
    Residual(Residual),
}

/// What a layer keeps from its forward pass for the backward pass.
pub(crate) enum Trace {
    Conv {
        input: FeatureMap,
        output: Option<FeatureMap>,
    },
    Norm {
        input: FeatureMap,
    },
    Relu {
        output: FeatureMap,
    },
    Pool {
        input_shape: (usize, usize, usize),
        argmax: Vec<u32>,
    },
    Residual {
        main: Vec<Trace>,
        shortcut: Vec<Trace>,
        output: FeatureMap,
    },
}

impl Layer {
    pub fn id(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.id,
            Layer::Norm(l) => &l.id,
            Layer::Relu(id) => id,
            Layer::MaxPool(l) => &l.id,
            Layer::Residual(l) => &l.id,
        }
    }

    pub(crate) fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        match self {
            Layer::Conv(l) => {
                out.push(&l.weight);
                if let Some(b) = &l.bias {
                    out.push(b);
                }
            }
            Layer::Norm(l) => out.extend([&l.gamma, &l.beta, &l.running_mean, &l.running_var]),
            Layer::Relu(_) | Layer::MaxPool(_) => {}
            Layer::Residual(l) => l.main.iter().chain(&l.shortcut).for_each(|x| x.visit_params(out)),
        }
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            Layer::Conv(l) => {
                out.push(&mut l.weight);
                if let Some(b) = &mut l.bias {
                    out.push(b);
                }
            }
            Layer::Norm(l) => out.extend([&mut l.gamma, &mut l.beta, &mut l.running_mean, &mut l.running_var]),
            Layer::Relu(_) | Layer::MaxPool(_) => {}
            Layer::Residual(l) => l
                .main
                .iter_mut()
                .chain(l.shortcut.iter_mut())
                .for_each(|x| x.visit_params_mut(out)),
        }
    }

    /// Output `(h, w, c)` for an input of the given shape, or `None` if the
    /// input is too small.
    pub fn output_shape(&self, (h, w, c): (usize, usize, usize)) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Conv(l) => {
                if c != l.in_channels {
                    return None;
                }
                l.output_dims(h, w).map(|(ho, wo)| (ho, wo, l.out_channels))
            }
            Layer::Norm(_) | Layer::Relu(_) => Some((h, w, c)),
            Layer::MaxPool(p) => {
                if h + 2 * p.padding < p.kernel || w + 2 * p.padding < p.kernel {
                    return None;
                }
                let (ho, wo) = p.output_dims(h, w);
                Some((ho, wo, c))
            }
            Layer::Residual(r) => {
                let main = r.main.iter().try_fold((h, w, c), |s, l| l.output_shape(s))?;
                let short = r.shortcut.iter().try_fold((h, w, c), |s, l| l.output_shape(s))?;
                (main == short).then_some(main)
            }
        }
    }

    pub(crate) fn forward(&self, x: FeatureMap, trace: Option<&mut Vec<Trace>>) -> FeatureMap {
        match self {
            Layer::Conv(l) => {
                let out = l.forward(&x);
                if let Some(t) = trace {
                    t.push(Trace::Conv {
                        output: l.relu.then(|| out.clone()),
                        input: x,
                    });
                }
                out
            }
            Layer::Norm(l) => {
                let out = l.forward(&x);
                if let Some(t) = trace {
                    t.push(Trace::Norm { input: x });
                }
                out
            }
            Layer::Relu(_) => {
                let mut out = x;
                out.data.iter_mut().for_each(|v| *v = v.max(0.0));
                if let Some(t) = trace {
                    t.push(Trace::Relu { output: out.clone() });
                }
                out
            }
            Layer::MaxPool(p) => {
                let shape = (x.h, x.w, x.c);
                let (out, argmax) = p.forward(&x);
                if let Some(t) = trace {
                    t.push(Trace::Pool {
                        input_shape: shape,
                        argmax,
                    });
                }
                out
            }
            Layer::Residual(r) => {
                let keep = trace.is_some();
                let mut main_trace = Vec::new();
                let mut short_trace = Vec::new();
                let main = run_layers(&r.main, x.clone(), keep.then_some(&mut main_trace));
                let short = run_layers(&r.shortcut, x, keep.then_some(&mut short_trace));
                let mut out = main;
                for (o, s) in out.data.iter_mut().zip(&short.data) {
                    *o = (*o + *s).max(0.0);
                }
                if let Some(t) = trace {
                    t.push(Trace::Residual {
                        main: main_trace,
                        shortcut: short_trace,
                        output: out.clone(),
                    });
                }
                out
            }
        }
    }

    pub(crate) fn backward(&self, trace: Trace, dy: FeatureMap, grads: &mut Gradients, need_dx: bool) -> Option<FeatureMap> {
        match (self, trace) {
            (Layer::Conv(l), Trace::Conv { input, output }) => l.backward(&input, output.as_ref(), dy, grads, need_dx),
            (Layer::Norm(l), Trace::Norm { input }) => l.backward(&input, dy, grads, need_dx),
            (Layer::Relu(_), Trace::Relu { output }) => {
                let mut dx = dy;
                for (d, y) in dx.data.iter_mut().zip(&output.data) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
                Some(dx)
            }
            (Layer::MaxPool(_), Trace::Pool { input_shape, argmax }) => {
                let (h, w, c) = input_shape;
                let mut dx = FeatureMap::zeros(h, w, c);
                for (d, &idx) in dy.data.iter().zip(&argmax) {
                    dx.data[idx as usize] += *d;
                }
                Some(dx)
            }
            (Layer::Residual(r), Trace::Residual { main, shortcut, output }) => {
                let mut d = dy;
                for (g, y) in d.data.iter_mut().zip(&output.data) {
                    if *y <= 0.0 {
                        *g = 0.0;
                    }
                }
                let dmain = backward_layers(&r.main, main, d.clone(), grads, need_dx);
                if r.shortcut.is_empty() {
                    return dmain.map(|mut dm| {
                        dm.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += *b);
                        dm
                    });
                }
                let dshort = backward_layers(&r.shortcut, shortcut, d, grads, need_dx);
                match (dmain, dshort) {
                    (Some(mut a), Some(b)) => {
                        a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
                        Some(a)
                    }
                    _ => None,
                }
            }
            _ => unreachable!("trace does not match layer"),
        }
    }
}

pub(crate) fn run_layers(layers: &[Layer], mut x: FeatureMap, mut trace: Option<&mut Vec<Trace>>) -> FeatureMap {
    for layer in layers {
        x = layer.forward(x, trace.as_deref_mut());
    }
    x
}

/// Backpropagates through `layers` given traces in forward order.
pub(crate) fn backward_layers(
    layers: &[Layer],
    traces: Vec<Trace>,
    mut dy: FeatureMap,
    grads: &mut Gradients,
    need_input_grad: bool,
) -> Option<FeatureMap> {
    debug_assert_eq!(layers.len(), traces.len());
    for (i, (layer, trace)) in layers.iter().zip(traces).enumerate().rev() {
        dy = layer.backward(trace, dy, grads, i > 0 || need_input_grad)?;
    }
    need_input_grad.then_some(dy)
}

// SPDX-License-Identifier: Apache-2.0

//! Layered feedforward network IR and its frame-based float evaluator.
//!
//! Every weighted layer is a valid-mode, stride-1 convolution; a
//! fully-connected layer is a convolution whose kernel covers its whole input
//! map. Feature maps are `(c, y, x)` row-major.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::factorizer::FactoredLayer;
use crate::math::exp;
use crate::tensor::Tensor4;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    FullyConnected,
    ChannelFilter,
    VerticalFilter,
    HorizontalFilter,
    CodeGeneration,
    InverseTransform,
    Relu,
    MaxPool,
    Softmax,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Conv,
        LayerKind::FullyConnected,
        LayerKind::ChannelFilter,
        LayerKind::VerticalFilter,
        LayerKind::HorizontalFilter,
        LayerKind::CodeGeneration,
        LayerKind::InverseTransform,
        LayerKind::Relu,
        LayerKind::MaxPool,
        LayerKind::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::ChannelFilter => "channel_filter",
            LayerKind::VerticalFilter => "vertical_filter",
            LayerKind::HorizontalFilter => "horizontal_filter",
            LayerKind::CodeGeneration => "code_generation",
            LayerKind::InverseTransform => "inverse_transform",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub fn is_weighted(self) -> bool {
        !matches!(
            self,
            LayerKind::Relu | LayerKind::MaxPool | LayerKind::Softmax
        )
    }

    /// One of the five kinds produced by factorization.
    pub fn is_sub_layer(self) -> bool {
        matches!(
            self,
            LayerKind::ChannelFilter
                | LayerKind::VerticalFilter
                | LayerKind::HorizontalFilter
                | LayerKind::CodeGeneration
                | LayerKind::InverseTransform
        )
    }
}

impl core::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weights: Option<Tensor4>,
    pub bias: Option<Vec<f64>>,
    pub pool: Option<Pool>,
}

impl LayerSpec {
    pub fn weighted(kind: LayerKind, weights: Tensor4, bias: Option<Vec<f64>>) -> Self {
        Self {
            kind,
            weights: Some(weights),
            bias,
            pool: None,
        }
    }

    pub fn relu() -> Self {
        Self::activation(LayerKind::Relu)
    }

    pub fn softmax() -> Self {
        Self::activation(LayerKind::Softmax)
    }

    fn activation(kind: LayerKind) -> Self {
        Self {
            kind,
            weights: None,
            bias: None,
            pool: None,
        }
    }

    pub fn maxpool(window: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool,
            weights: None,
            bias: None,
            pool: Some(Pool { window, stride }),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_ref().map_or(0, |w| w.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MapDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl MapDims {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A `C × H × W` real map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dims: MapDims,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(dims: MapDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_vec(dims: MapDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DataLength {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> MapDims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.dims.h + y) * self.dims.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.dims.h + y) * self.dims.w + x] = v;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Labeled images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<FeatureMap>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<FeatureMap>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn slice(&self, range: core::ops::Range<usize>) -> Dataset {
        Dataset {
            images: self.images[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureMap, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dims: MapDims,
    pub layers: Vec<LayerSpec>,
}

fn layer_error(index: usize, kind: LayerKind, reason: String) -> Error {
    Error::Layer {
        index,
        kind: kind.name(),
        reason,
    }
}

/// Output dims of one layer applied to `input`, or why it does not fit.
pub fn layer_output_dims(
    layer: &LayerSpec,
    input: MapDims,
) -> core::result::Result<MapDims, String> {
    use LayerKind::*;
    if layer.kind.is_weighted() {
        let w = layer
            .weights
            .as_ref()
            .ok_or_else(|| String::from("weighted layer has no weights"))?;
        if layer.pool.is_some() {
            return Err("weighted layer carries pool parameters".into());
        }
        let [c, kh, kw, f] = w.dims();
        if c != input.c {
            return Err(format!("expects {c} input channels, got {}", input.c));
        }
        match layer.kind {
            FullyConnected if (kh, kw) != (input.h, input.w) => {
                return Err(format!(
                    "fully connected kernel {kh}x{kw} must cover the {}x{} input",
                    input.h, input.w
                ))
            }
            ChannelFilter | CodeGeneration | InverseTransform if (kh, kw) != (1, 1) => {
                return Err(format!("pointwise kernel must be 1x1, got {kh}x{kw}"))
            }
            VerticalFilter if kw != 1 => {
                return Err(format!("vertical kernel must have width 1, got {kw}"))
            }
            HorizontalFilter if kh != 1 => {
                return Err(format!("horizontal kernel must have height 1, got {kh}"))
            }
            HorizontalFilter if c != f => {
                return Err(format!(
                    "horizontal filter maps {c} channels to {f}; counts must match"
                ))
            }
            _ => {}
        }
        if kh > input.h || kw > input.w {
            return Err(format!(
                "kernel {kh}x{kw} larger than {}x{} input",
                input.h, input.w
            ));
        }
        if let Some(b) = &layer.bias {
            if b.len() != f {
                return Err(format!("bias has {} entries for {f} features", b.len()));
            }
        }
        return Ok(MapDims::new(f, input.h - kh + 1, input.w - kw + 1));
    }
    if layer.weights.is_some() || layer.bias.is_some() {
        return Err("activation layer carries weights".into());
    }
    match layer.kind {
        MaxPool => {
            let p = layer
                .pool
                .ok_or_else(|| String::from("maxpool layer has no window/stride"))?;
            if p.window == 0 || p.stride == 0 {
                return Err("pool window and stride must be at least 1".into());
            }
            if p.window > input.h || p.window > input.w {
                return Err(format!(
                    "pool window {} larger than {}x{} input",
                    p.window, input.h, input.w
                ));
            }
            Ok(MapDims::new(
                input.c,
                (input.h - p.window) / p.stride + 1,
                (input.w - p.window) / p.stride + 1,
            ))
        }
        _ => {
            if layer.pool.is_some() {
                return Err("activation layer carries pool parameters".into());
            }
            Ok(input)
        }
    }
}

impl NetworkSpec {
    pub fn new(input_dims: MapDims, layers: Vec<LayerSpec>) -> Self {
        Self { input_dims, layers }
    }

    /// Dims after every layer (`shapes()[i]` is the output of layer `i`).
    pub fn shapes(&self) -> Result<Vec<MapDims>> {
        if self.input_dims.is_empty() {
            return Err(Error::Shape(format!(
                "input dims {:?} are empty",
                self.input_dims
            )));
        }
        let mut dims = self.input_dims;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            dims = layer_output_dims(layer, dims).map_err(|r| layer_error(i, layer.kind, r))?;
            out.push(dims);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn output_dims(&self) -> Result<MapDims> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input_dims))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    fn check_input(&self, image: &FeatureMap) -> Result<()> {
        if image.dims != self.input_dims {
            return Err(Error::Shape(format!(
                "image is {:?}, network expects {:?}",
                image.dims, self.input_dims
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<FeatureMap> {
        self.validate()?;
        self.check_input(image)?;
        let mut x = image.clone();
        for layer in &self.layers {
            x = apply_layer(layer, &x);
        }
        Ok(x)
    }

    /// Input followed by the output of every layer.
    pub fn forward_all(&self, image: &FeatureMap) -> Result<Vec<FeatureMap>> {
        self.validate()?;
        self.check_input(image)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(image.clone());
        for layer in &self.layers {
            let next = apply_layer(layer, acts.last().expect("non-empty"));
            acts.push(next);
        }
        Ok(acts)
    }

    /// Replaces layer `index` with the five sub-layers of `f`, bias on the
    /// inverse transform.
    pub fn expand_factored(&self, index: usize, f: &FactoredLayer) -> Result<NetworkSpec> {
        let shapes = self.shapes()?;
        let layer = self
            .layers
            .get(index)
            .ok_or_else(|| Error::Shape(format!("no layer at index {index}")))?;
        if !matches!(layer.kind, LayerKind::Conv | LayerKind::FullyConnected) {
            return Err(layer_error(
                index,
                layer.kind,
                "only conv and fully_connected layers can be expanded".into(),
            ));
        }
        f.validate()?;
        let dims = layer.weights.as_ref().expect("validated").dims();
        if f.original_dims() != dims {
            return Err(layer_error(
                index,
                layer.kind,
                format!(
                    "factorization is for {:?}, layer is {:?}",
                    f.original_dims(),
                    dims
                ),
            ));
        }
        let bias = f.bias.clone().or_else(|| layer.bias.clone());
        let subs = [
            LayerSpec::weighted(LayerKind::ChannelFilter, f.chi_c.clone(), None),
            LayerSpec::weighted(LayerKind::VerticalFilter, f.chi_v.clone(), None),
            LayerSpec::weighted(LayerKind::HorizontalFilter, f.chi_h.clone(), None),
            LayerSpec::weighted(LayerKind::CodeGeneration, f.chi_g.clone(), None),
            LayerSpec::weighted(LayerKind::InverseTransform, f.chi_i.clone(), bias),
        ];
        let mut layers = Vec::with_capacity(self.layers.len() + 4);
        layers.extend_from_slice(&self.layers[..index]);
        layers.extend(subs);
        layers.extend_from_slice(&self.layers[index + 1..]);
        let net = NetworkSpec::new(self.input_dims, layers);
        let new_shapes = net.shapes()?;
        debug_assert_eq!(new_shapes[index + 4], shapes[index]);
        Ok(net)
    }

    pub fn predict(&self, image: &FeatureMap) -> Result<usize> {
        Ok(argmax(self.forward(image)?.data()))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose argmax output equals the label.
pub fn evaluate_accuracy(net: &NetworkSpec, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = net.output_dims()?.len();
    let mut correct = 0usize;
    for (image, label) in dataset.iter() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if net.predict(image)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Applies a layer already known to fit its input.
pub(crate) fn apply_layer(layer: &LayerSpec, input: &FeatureMap) -> FeatureMap {
    match layer.kind {
        LayerKind::Relu => FeatureMap {
            dims: input.dims,
            data: input.data.iter().map(|&v| v.max(0.0)).collect(),
        },
        LayerKind::Softmax => softmax_channels(input),
        LayerKind::MaxPool => maxpool(input, layer.pool.expect("validated")),
        _ => conv_valid(
            input,
            layer.weights.as_ref().expect("validated"),
            layer.bias.as_deref(),
        ),
    }
}

pub(crate) fn conv_valid(input: &FeatureMap, w: &Tensor4, bias: Option<&[f64]>) -> FeatureMap {
    let [cn, khn, kwn, fn_] = w.dims();
    let oh = input.dims.h - khn + 1;
    let ow = input.dims.w - kwn + 1;
    let mut out = FeatureMap::zeros(MapDims::new(fn_, oh, ow));
    let plane = oh * ow;
    if let Some(b) = bias {
        for (f, &bv) in b.iter().enumerate() {
            out.data[f * plane..(f + 1) * plane].fill(bv);
        }
    }
    let wd = w.data();
    for c in 0..cn {
        for kh in 0..khn {
            for kw in 0..kwn {
                let taps = &wd[w.offset(c, kh, kw, 0)..w.offset(c, kh, kw, 0) + fn_];
                for y in 0..oh {
                    for x in 0..ow {
                        let v = input.get(c, y + kh, x + kw);
                        if v == 0.0 {
                            continue;
                        }
                        let o = y * ow + x;
                        for (f, &wt) in taps.iter().enumerate() {
                            out.data[f * plane + o] += v * wt;
                        }
                    }
                }
            }
        }
    }
    out
}

fn maxpool(input: &FeatureMap, p: Pool) -> FeatureMap {
    let d = input.dims;
    let oh = (d.h - p.window) / p.stride + 1;
    let ow = (d.w - p.window) / p.stride + 1;
    let mut out = FeatureMap::zeros(MapDims::new(d.c, oh, ow));
    for c in 0..d.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for i in 0..p.window {
                    for j in 0..p.window {
                        m = m.max(input.get(c, y * p.stride + i, x * p.stride + j));
                    }
                }
                out.set(c, y, x, m);
            }
        }
    }
    out
}

/// Softmax across channels at every spatial position.
pub(crate) fn softmax_channels(input: &FeatureMap) -> FeatureMap {
    let d = input.dims;
    let mut out = FeatureMap::zeros(d);
    for y in 0..d.h {
        for x in 0..d.w {
            let max = (0..d.c)
                .map(|c| input.get(c, y, x))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..d.c {
                let e = exp(input.get(c, y, x) - max);
                out.set(c, y, x, e);
                sum += e;
            }
            for c in 0..d.c {
                let v = out.get(c, y, x) / sum;
                out.set(c, y, x, v);
            }
        }
    }
    out
}

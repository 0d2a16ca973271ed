// SPDX-License-Identifier: Apache-2.0

//! Cross-entropy training of pooling-free networks with plain mini-batch SGD.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::{exp, ln};
use crate::netir::{
    apply_layer, evaluate_accuracy, Dataset, FeatureMap, LayerKind, LayerSpec, MapDims, NetworkSpec,
};
use crate::tensor::Tensor4;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// L2 penalty on weights (not biases).
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.l2.is_nan() || self.l2 < 0.0 {
            return Err(Error::Config(format!(
                "l2 must be non-negative, got {}",
                self.l2
            )));
        }
        Ok(())
    }
}

/// Gradient of one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Tensor4,
    pub bias: Option<Vec<f64>>,
}

/// Per-layer gradients, `None` for layers without parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
}

/// Number of layers that produce logits (a trailing softmax is folded into the
/// loss).
fn trainable_prefix(net: &NetworkSpec) -> Result<usize> {
    net.validate()?;
    let mut end = net.layers.len();
    if end > 0 && net.layers[end - 1].kind == LayerKind::Softmax {
        end -= 1;
    }
    for (index, layer) in net.layers[..end].iter().enumerate() {
        match layer.kind {
            LayerKind::MaxPool | LayerKind::Softmax => {
                return Err(Error::Layer {
                    index,
                    kind: layer.kind.name(),
                    reason: "not supported by gradient training".into(),
                })
            }
            _ => {}
        }
    }
    Ok(end)
}

fn zero_grads(net: &NetworkSpec) -> Result<Gradients> {
    let mut layers = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        layers.push(match &layer.weights {
            Some(w) => Some(LayerGrad {
                weights: Tensor4::zeros(w.dims())?,
                bias: layer.bias.as_ref().map(|b| vec![0.0; b.len()]),
            }),
            None => None,
        });
    }
    Ok(Gradients { layers })
}

/// Log-probabilities with max subtraction.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = ln(logits.iter().map(|&z| exp(z - max)).sum::<f64>());
    logits.iter().map(|&z| z - max - lse).collect()
}

fn accumulate<'a>(
    net: &NetworkSpec,
    end: usize,
    batch: impl ExactSizeIterator<Item = (&'a FeatureMap, usize)>,
    grads: &mut Gradients,
) -> Result<f64> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for (image, label) in batch {
        if image.dims() != net.input_dims {
            return Err(Error::Shape(format!(
                "image is {:?}, network expects {:?}",
                image.dims(),
                net.input_dims
            )));
        }
        let mut acts = Vec::with_capacity(end + 1);
        acts.push(image.clone());
        for layer in &net.layers[..end] {
            let next = apply_layer(layer, acts.last().expect("non-empty"));
            acts.push(next);
        }
        let logits = acts[end].data();
        if label >= logits.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: logits.len(),
            });
        }
        let logp = log_softmax(logits);
        loss -= logp[label] * scale;

        let mut delta_data: Vec<f64> = logp.iter().map(|&lp| exp(lp) * scale).collect();
        delta_data[label] -= scale;
        let mut delta = FeatureMap::from_vec(acts[end].dims(), delta_data)?;

        for li in (0..end).rev() {
            let layer = &net.layers[li];
            let input = &acts[li];
            match layer.kind {
                LayerKind::Relu => {
                    for (d, &x) in delta.data_mut().iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                _ => {
                    let w = layer.weights.as_ref().expect("validated");
                    let g = grads.layers[li]
                        .as_mut()
                        .expect("weighted layer has a gradient slot");
                    let need_input_grad = li > 0;
                    delta = conv_backward(input, w, &delta, g, need_input_grad);
                }
            }
        }
    }
    Ok(loss)
}

/// Accumulates weight and bias gradients of a valid convolution and returns
/// the gradient with respect to its input (zeros when not requested).
fn conv_backward(
    input: &FeatureMap,
    w: &Tensor4,
    delta: &FeatureMap,
    g: &mut LayerGrad,
    want_input: bool,
) -> FeatureMap {
    let [cn, khn, kwn, fn_] = w.dims();
    let od = delta.dims();
    let plane = od.h * od.w;
    if let Some(gb) = g.bias.as_mut() {
        for (f, b) in gb.iter_mut().enumerate() {
            *b += delta.data()[f * plane..(f + 1) * plane].iter().sum::<f64>();
        }
    }
    let mut din = FeatureMap::zeros(input.dims());
    let wd = w.data();
    let dd = delta.data();
    for c in 0..cn {
        for kh in 0..khn {
            for kw in 0..kwn {
                let off = w.offset(c, kh, kw, 0);
                for y in 0..od.h {
                    for x in 0..od.w {
                        let o = y * od.w + x;
                        let v = input.get(c, y + kh, x + kw);
                        let gw = &mut g.weights.data_mut()[off..off + fn_];
                        let mut back = 0.0;
                        for f in 0..fn_ {
                            let d = dd[f * plane + o];
                            gw[f] += v * d;
                            back += wd[off + f] * d;
                        }
                        if want_input {
                            let cur = din.get(c, y + kh, x + kw);
                            din.set(c, y + kh, x + kw, cur + back);
                        }
                    }
                }
            }
        }
    }
    din
}

fn l2_term(net: &NetworkSpec, l2: f64, grads: &mut Gradients) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let mut penalty = 0.0;
    for (layer, g) in net.layers.iter().zip(grads.layers.iter_mut()) {
        if let (Some(w), Some(g)) = (&layer.weights, g.as_mut()) {
            for (gw, &wv) in g.weights.data_mut().iter_mut().zip(w.data()) {
                *gw += l2 * wv;
                penalty += 0.5 * l2 * wv * wv;
            }
        }
    }
    penalty
}

/// Mean cross-entropy of the batch and its gradient for every weighted layer.
pub fn loss_and_gradients(net: &NetworkSpec, batch: &Dataset) -> Result<(f64, Gradients)> {
    loss_and_gradients_l2(net, batch, 0.0)
}

pub fn loss_and_gradients_l2(
    net: &NetworkSpec,
    batch: &Dataset,
    l2: f64,
) -> Result<(f64, Gradients)> {
    let end = trainable_prefix(net)?;
    let mut grads = zero_grads(net)?;
    let loss = accumulate(
        net,
        end,
        batch.images.iter().zip(batch.labels.iter().copied()),
        &mut grads,
    )?;
    let penalty = l2_term(net, l2, &mut grads);
    Ok((loss + penalty, grads))
}

fn sgd_step(net: &mut NetworkSpec, grads: &Gradients, lr: f64) {
    for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
        let Some(g) = g else { continue };
        if let Some(w) = layer.weights.as_mut() {
            for (wv, gv) in w.data_mut().iter_mut().zip(g.weights.data()) {
                *wv -= lr * gv;
            }
        }
        if let (Some(b), Some(gb)) = (layer.bias.as_mut(), g.bias.as_ref()) {
            for (bv, gv) in b.iter_mut().zip(gb) {
                *bv -= lr * gv;
            }
        }
    }
}

/// Mini-batch SGD from `net`, returning the state with the best validation
/// accuracy seen (the starting state included).
pub fn finetune(
    net: &NetworkSpec,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<NetworkSpec> {
    finetune_with_progress(net, train, valid, cfg, |_, _| {})
}

/// [`finetune`] with a callback receiving `(epoch, validation accuracy)`.
pub fn finetune_with_progress(
    net: &NetworkSpec,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<NetworkSpec> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let end = trainable_prefix(net)?;
    let mut current = net.clone();
    let mut best = net.clone();
    let mut best_acc = evaluate_accuracy(net, valid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = zero_grads(&current)?;
            let batch = chunk.iter().map(|&i| (&train.images[i], train.labels[i]));
            accumulate(&current, end, batch, &mut grads)?;
            l2_term(&current, cfg.l2, &mut grads);
            sgd_step(&mut current, &grads, cfg.learning_rate);
        }
        let acc = evaluate_accuracy(&current, valid)?;
        progress(epoch, acc);
        if acc > best_acc {
            best_acc = acc;
            best = current.clone();
        }
    }
    Ok(best)
}

/// Softmax regression (one fully-connected layer over the whole image plus
/// softmax), trained from zero weights.
pub fn train_baseline_softmax(
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<NetworkSpec> {
    let first = train.images.first().ok_or(Error::EmptyDataset)?;
    let dims: MapDims = first.dims();
    let classes = train.labels.iter().copied().max().unwrap_or(0) + 1;
    let weights = Tensor4::zeros([dims.c, dims.h, dims.w, classes])?;
    let net = NetworkSpec::new(
        dims,
        vec![
            LayerSpec::weighted(LayerKind::FullyConnected, weights, Some(vec![0.0; classes])),
            LayerSpec::softmax(),
        ],
    );
    finetune(&net, train, valid, cfg)
}

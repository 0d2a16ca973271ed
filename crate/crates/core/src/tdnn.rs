// SPDX-License-Identifier: Apache-2.0

//! Time-delay network over a raster-scanned input stream.
//!
//! An image `C × H × W` is fed as `C` sequences `s_z(t) = I(z, y, x)` with
//! `t = y·W + x`. Every stage of the network runs on that one raster clock:
//! a spatial tap `(i, j)` of a kernel becomes a delay of
//! `step · ((Kh−1−i)·W + (Kw−1−j))` samples, realized by a chain of unit delay
//! elements per input channel. Valid convolution and pooling shrink the map
//! without changing the clock; a stage's output at local position `(y', x')`
//! appears at raster position `(oy + y'·step, ox + x'·step)` and all other
//! steps are computed but masked.
//!
//! Every connection whose weight is neither 0 nor 1 becomes one synapse node
//! feeding exactly one neuron. Zero weights are dropped; unit weights,
//! delays, fan-out and tap selection are plain edges.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::factorizer::FactoredLayer;
use crate::netir::{FeatureMap, LayerKind, MapDims, NetworkSpec};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    InputTap {
        channel: usize,
    },
    Synapse {
        weight: f64,
        source: NodeId,
    },
    /// Sums its inputs: synapse nodes, plus the source node itself for each
    /// unit-weight connection.
    Neuron {
        inputs: Vec<NodeId>,
        bias: f64,
        activation: Activation,
    },
    /// Holds the previous raster sample of `source`.
    Delay {
        source: NodeId,
    },
    Max {
        sources: Vec<NodeId>,
    },
    Output {
        class: usize,
        source: NodeId,
    },
}

impl Node {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Node::InputTap { .. } => "input",
            Node::Synapse { .. } => "synapse",
            Node::Neuron { .. } => "neuron",
            Node::Delay { .. } => "delay",
            Node::Max { .. } => "max",
            Node::Output { .. } => "output",
        }
    }
}

/// Where a stage's map lives on the global raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub offset_y: usize,
    pub offset_x: usize,
    /// Raster samples between neighbouring map positions (product of pooling
    /// strides so far).
    pub step: usize,
    pub dims: MapDims,
}

impl Geometry {
    /// Local `(y, x)` of the map position produced at raster step `t`, or
    /// `None` if the step is masked.
    pub fn position(&self, t: usize, raster_width: usize) -> Option<(usize, usize)> {
        let (y, x) = (t / raster_width, t % raster_width);
        if y < self.offset_y || x < self.offset_x {
            return None;
        }
        let (dy, dx) = (y - self.offset_y, x - self.offset_x);
        if dy % self.step != 0 || dx % self.step != 0 {
            return None;
        }
        let (ly, lx) = (dy / self.step, dx / self.step);
        (ly < self.dims.h && lx < self.dims.w).then_some((ly, lx))
    }

    pub fn first_valid(&self, raster_width: usize) -> usize {
        self.offset_y * raster_width + self.offset_x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Neurons(LayerKind),
    MaxPool,
}

/// A chain of unit delays hanging off one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayChain {
    pub source: NodeId,
    pub elements: Vec<NodeId>,
}

/// One pipeline stage: the nodes created for one sub-layer or pooling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub kind: StageKind,
    pub layer_index: usize,
    pub input: Geometry,
    pub output: Geometry,
    /// Kernel or pooling window `(height, width)`.
    pub kernel: (usize, usize),
    pub in_channels: usize,
    /// Neuron or max node per output channel.
    pub units: Vec<NodeId>,
    pub synapses: Vec<NodeId>,
    pub delay_chains: Vec<DelayChain>,
    pub vertical_delays: usize,
    pub horizontal_delays: usize,
}

impl Stage {
    pub fn delay_count(&self) -> usize {
        self.vertical_delays + self.horizontal_delays
    }

    /// Raster steps from the stage's first valid input to its first valid
    /// output.
    pub fn first_valid_offset(&self, raster_width: usize) -> usize {
        self.output.first_valid(raster_width) - self.input.first_valid(raster_width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdnnGraph {
    pub nodes: Vec<Node>,
    /// Stage index of each node (`None` for input taps and output ports).
    pub node_stage: Vec<Option<usize>>,
    pub input_dims: MapDims,
    pub inputs: Vec<NodeId>,
    pub stages: Vec<Stage>,
    pub outputs: Vec<NodeId>,
    pub output_geometry: Geometry,
}

impl TdnnGraph {
    #[inline]
    pub fn raster_width(&self) -> usize {
        self.input_dims.w
    }

    pub fn raster_len(&self) -> usize {
        self.input_dims.h * self.input_dims.w
    }

    pub fn count(&self, pred: impl Fn(&Node) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(n)).count()
    }

    pub fn synapse_count(&self) -> usize {
        self.count(|n| matches!(n, Node::Synapse { .. }))
    }

    pub fn neuron_count(&self) -> usize {
        self.count(|n| matches!(n, Node::Neuron { .. }))
    }

    pub fn delay_count(&self) -> usize {
        self.count(|n| matches!(n, Node::Delay { .. }))
    }

    pub fn max_count(&self) -> usize {
        self.count(|n| matches!(n, Node::Max { .. }))
    }

    pub fn pipeline_depth(&self) -> usize {
        self.stages.len()
    }

    /// Raster step of the first valid network output.
    pub fn first_valid_step(&self) -> usize {
        self.output_geometry.first_valid(self.raster_width())
    }

    /// All `(from, to)` edges.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            match node {
                Node::InputTap { .. } => {}
                Node::Synapse { source, .. }
                | Node::Delay { source }
                | Node::Output { source, .. } => out.push((*source, id)),
                Node::Neuron { inputs, .. } => out.extend(inputs.iter().map(|&s| (s, id))),
                Node::Max { sources } => out.extend(sources.iter().map(|&s| (s, id))),
            }
        }
        out
    }
}

/// Delay-element counts for one factored layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayBudget {
    pub vertical: usize,
    pub horizontal: usize,
    pub total: usize,
    /// Raster steps before the first valid output.
    pub first_valid: usize,
}

/// Delay elements a factored layer needs on a raster of width `width`.
pub fn delay_budget(f: &FactoredLayer, width: usize) -> Result<DelayBudget> {
    delay_budget_strided(f, width, 1)
}

/// [`delay_budget`] for a layer whose input map is decimated by `step`
/// raster samples (i.e. it follows pooling).
pub fn delay_budget_strided(f: &FactoredLayer, width: usize, step: usize) -> Result<DelayBudget> {
    let [_, kh, kw, _] = f.original_dims();
    if width < kw {
        return Err(Error::ScanTooNarrow { kernel: kw, width });
    }
    let step = step.max(1);
    let vertical = step * width * (kh - 1) * f.ranks.rc;
    let horizontal = step * (kw - 1) * f.ranks.rv;
    Ok(DelayBudget {
        vertical,
        horizontal,
        total: vertical + horizontal,
        first_valid: step * (width * (kh - 1) + kw - 1),
    })
}

/// Serializes an image into `C` raster-order sequences.
pub fn serialize_input(image: &FeatureMap) -> Vec<Vec<f64>> {
    let d = image.dims();
    (0..d.c)
        .map(|c| image.data()[c * d.h * d.w..(c + 1) * d.h * d.w].to_vec())
        .collect()
}

/// Inverse of [`serialize_input`].
pub fn deserialize_input(seqs: &[Vec<f64>], h: usize, w: usize) -> Result<FeatureMap> {
    let dims = MapDims::new(seqs.len(), h, w);
    let mut data = Vec::with_capacity(dims.len());
    for s in seqs {
        if s.len() != h * w {
            return Err(Error::DataLength {
                expected: h * w,
                actual: s.len(),
            });
        }
        data.extend_from_slice(s);
    }
    FeatureMap::from_vec(dims, data)
}

struct Builder {
    nodes: Vec<Node>,
    node_stage: Vec<Option<usize>>,
}

impl Builder {
    fn push(&mut self, node: Node, stage: Option<usize>) -> NodeId {
        self.nodes.push(node);
        self.node_stage.push(stage);
        self.nodes.len() - 1
    }

    /// Delay chain of `len` elements off `source`; returns the chain so that
    /// `chain[d-1]` carries `source` delayed by `d`.
    fn chain(&mut self, source: NodeId, len: usize, stage: usize) -> DelayChain {
        let mut elements = Vec::with_capacity(len);
        let mut prev = source;
        for _ in 0..len {
            prev = self.push(Node::Delay { source: prev }, Some(stage));
            elements.push(prev);
        }
        DelayChain { source, elements }
    }
}

fn tap(chain: &DelayChain, delay: usize) -> NodeId {
    if delay == 0 {
        chain.source
    } else {
        chain.elements[delay - 1]
    }
}

fn unsupported(index: usize, kind: LayerKind, reason: &str) -> Error {
    Error::Layer {
        index,
        kind: kind.name(),
        reason: reason.into(),
    }
}

/// Builds the time-delay network of a fully factored network.
pub fn build_tdnn(net: &NetworkSpec) -> Result<TdnnGraph> {
    let shapes = net.shapes()?;
    let raster_w = net.input_dims.w;
    let mut b = Builder {
        nodes: Vec::new(),
        node_stage: Vec::new(),
    };
    let inputs: Vec<NodeId> = (0..net.input_dims.c)
        .map(|channel| b.push(Node::InputTap { channel }, None))
        .collect();
    let mut channels = inputs.clone();
    let mut geom = Geometry {
        offset_y: 0,
        offset_x: 0,
        step: 1,
        dims: net.input_dims,
    };
    let mut stages: Vec<Stage> = Vec::new();

    for (index, layer) in net.layers.iter().enumerate() {
        let out_dims = shapes[index];
        match layer.kind {
            LayerKind::Conv | LayerKind::FullyConnected => {
                return Err(unsupported(
                    index,
                    layer.kind,
                    "unexpanded weighted layer; factorize it into sub-layers first",
                ))
            }
            LayerKind::Relu => {
                // ReLU commutes with max, so it can sit on the neurons feeding
                // any pooling stages.
                let target = stages
                    .iter()
                    .rposition(|s| matches!(s.kind, StageKind::Neurons(_)))
                    .ok_or_else(|| {
                        unsupported(
                            index,
                            layer.kind,
                            "no neuron stage to attach the activation to",
                        )
                    })?;
                for &u in &stages[target].units {
                    if let Node::Neuron { activation, .. } = &mut b.nodes[u] {
                        *activation = Activation::Relu;
                    }
                }
            }
            LayerKind::Softmax => {
                if index + 1 != net.layers.len() {
                    return Err(unsupported(
                        index,
                        layer.kind,
                        "softmax must be the last layer",
                    ));
                }
            }
            LayerKind::MaxPool => {
                let p = layer.pool.expect("validated");
                let stage_id = stages.len();
                let s = geom.step;
                let (vdel, hdel) = (s * raster_w * (p.window - 1), s * (p.window - 1));
                if raster_w < p.window {
                    return Err(Error::ScanTooNarrow {
                        kernel: p.window,
                        width: raster_w,
                    });
                }
                let mut chains = Vec::with_capacity(channels.len());
                let mut units = Vec::with_capacity(channels.len());
                for &ch in &channels {
                    let chain = b.chain(ch, vdel + hdel, stage_id);
                    let mut sources = Vec::with_capacity(p.window * p.window);
                    for i in 0..p.window {
                        for j in 0..p.window {
                            let d = s * ((p.window - 1 - i) * raster_w + (p.window - 1 - j));
                            sources.push(tap(&chain, d));
                        }
                    }
                    chains.push(chain);
                    units.push(b.push(Node::Max { sources }, Some(stage_id)));
                }
                let output = Geometry {
                    offset_y: geom.offset_y + s * (p.window - 1),
                    offset_x: geom.offset_x + s * (p.window - 1),
                    step: s * p.stride,
                    dims: out_dims,
                };
                stages.push(Stage {
                    kind: StageKind::MaxPool,
                    layer_index: index,
                    input: geom,
                    output,
                    kernel: (p.window, p.window),
                    in_channels: channels.len(),
                    units: units.clone(),
                    synapses: Vec::new(),
                    delay_chains: chains,
                    vertical_delays: vdel * channels.len(),
                    horizontal_delays: hdel * channels.len(),
                });
                channels = units;
                geom = output;
            }
            kind => {
                let w = layer.weights.as_ref().expect("validated");
                let [cn, kh, kw, fn_] = w.dims();
                if raster_w < kw {
                    return Err(Error::ScanTooNarrow {
                        kernel: kw,
                        width: raster_w,
                    });
                }
                let stage_id = stages.len();
                let s = geom.step;
                let (vdel, hdel) = (s * raster_w * (kh - 1), s * (kw - 1));
                let chains: Vec<DelayChain> = channels
                    .iter()
                    .map(|&ch| b.chain(ch, vdel + hdel, stage_id))
                    .collect();
                let mut synapses = Vec::with_capacity(w.len());
                let mut units = Vec::with_capacity(fn_);
                for f in 0..fn_ {
                    let mut inputs = Vec::with_capacity(cn * kh * kw);
                    for (c, chain) in chains.iter().enumerate() {
                        for i in 0..kh {
                            for j in 0..kw {
                                let d = s * ((kh - 1 - i) * raster_w + (kw - 1 - j));
                                let source = tap(chain, d);
                                let weight = w.get(c, i, j, f);
                                if weight == 0.0 {
                                    continue;
                                }
                                if weight == 1.0 {
                                    inputs.push(source);
                                    continue;
                                }
                                let id = b.push(Node::Synapse { weight, source }, Some(stage_id));
                                synapses.push(id);
                                inputs.push(id);
                            }
                        }
                    }
                    let bias = layer.bias.as_ref().map_or(0.0, |bv| bv[f]);
                    units.push(b.push(
                        Node::Neuron {
                            inputs,
                            bias,
                            activation: Activation::Identity,
                        },
                        Some(stage_id),
                    ));
                }
                let output = Geometry {
                    offset_y: geom.offset_y + s * (kh - 1),
                    offset_x: geom.offset_x + s * (kw - 1),
                    step: s,
                    dims: out_dims,
                };
                stages.push(Stage {
                    kind: StageKind::Neurons(kind),
                    layer_index: index,
                    input: geom,
                    output,
                    kernel: (kh, kw),
                    in_channels: cn,
                    units: units.clone(),
                    synapses,
                    delay_chains: chains,
                    vertical_delays: vdel * cn,
                    horizontal_delays: hdel * cn,
                });
                channels = units;
                geom = output;
            }
        }
    }
    if stages.is_empty() {
        return Err(Error::Shape(
            "network has no neuron or pooling stage".into(),
        ));
    }
    let final_dims = geom.dims;
    let outputs = channels
        .iter()
        .enumerate()
        .map(|(class, &source)| b.push(Node::Output { class, source }, None))
        .collect();
    debug_assert_eq!(final_dims.c, channels.len());
    Ok(TdnnGraph {
        nodes: b.nodes,
        node_stage: b.node_stage,
        input_dims: net.input_dims,
        inputs,
        stages,
        outputs,
        output_geometry: geom,
    })
}

/// One raster step of a streamed evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStep<T> {
    pub t: usize,
    /// Local output-map position when the step is valid.
    pub position: Option<(usize, usize)>,
    /// One value per output port.
    pub values: Vec<T>,
}

impl<T> StreamStep<T> {
    pub fn valid(&self) -> bool {
        self.position.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput<T> {
    pub steps: Vec<StreamStep<T>>,
}

impl<T> StreamOutput<T> {
    pub fn valid_steps(&self) -> impl Iterator<Item = &StreamStep<T>> {
        self.steps.iter().filter(|s| s.valid())
    }

    pub fn first_valid(&self) -> Option<usize> {
        self.valid_steps().next().map(|s| s.t)
    }
}

pub(crate) fn check_image(g: &TdnnGraph, image: &FeatureMap) -> Result<()> {
    if image.dims() != g.input_dims {
        return Err(Error::Shape(format!(
            "image is {:?}, graph expects {:?}",
            image.dims(),
            g.input_dims
        )));
    }
    Ok(())
}

/// Streams an image through the graph in float arithmetic, one raster step at
/// a time.
pub fn stream_forward(g: &TdnnGraph, image: &FeatureMap) -> Result<StreamOutput<f64>> {
    check_image(g, image)?;
    let w = g.raster_width();
    let mut values = vec![0.0f64; g.nodes.len()];
    let mut state = vec![0.0f64; g.nodes.len()];
    let delays: Vec<(NodeId, NodeId)> = g
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(id, n)| match n {
            Node::Delay { source } => Some((id, *source)),
            _ => None,
        })
        .collect();
    let mut steps = Vec::with_capacity(g.raster_len());
    for t in 0..g.raster_len() {
        let (y, x) = (t / w, t % w);
        for id in 0..g.nodes.len() {
            values[id] = match &g.nodes[id] {
                Node::InputTap { channel } => image.get(*channel, y, x),
                Node::Delay { .. } => state[id],
                Node::Synapse { weight, source } => weight * values[*source],
                Node::Neuron {
                    inputs,
                    bias,
                    activation,
                } => {
                    let sum = inputs.iter().fold(*bias, |acc, &s| acc + values[s]);
                    match activation {
                        Activation::Identity => sum,
                        Activation::Relu => sum.max(0.0),
                    }
                }
                Node::Max { sources } => sources
                    .iter()
                    .map(|&s| values[s])
                    .fold(f64::NEG_INFINITY, f64::max),
                Node::Output { source, .. } => values[*source],
            };
        }
        for &(id, src) in &delays {
            state[id] = values[src];
        }
        steps.push(StreamStep {
            t,
            position: g.output_geometry.position(t, w),
            values: g.outputs.iter().map(|&o| values[o]).collect(),
        });
    }
    Ok(StreamOutput { steps })
}

// SPDX-License-Identifier: Apache-2.0

//! Fixed-point evaluation of a [`TdnnGraph`], word-level and bit-serial.
//!
//! Words are `n`-bit two's complement with `m` fractional bits. A synapse
//! output is the exact product shifted right by `m` (floor) and wrapped to
//! `n` bits; a neuron adds its synapse outputs and bias modulo `2^n` and then
//! applies its activation. Inputs, weights and biases are quantized by
//! rounding half to even and saturating.
//!
//! [`cycle_simulate`] models the serial datapath one clock at a time. Each
//! raster sample occupies a period of `2n` cycles; words travel LSB first in
//! phases `0..n`. A delay element is an `n`-bit shift register that shifts
//! only in those phases. A synapse is a serial/parallel multiplier whose
//! product bit `k` leaves at phase `k`; the neuron's serial adder consumes
//! phases `m..m+n` and a `2n − m` bit register realigns the sum to phases
//! `0..n` of the next period, so every stage adds one period of latency.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::round_ties_even;
use crate::netir::{argmax, FeatureMap, NetworkSpec};
use crate::tdnn::{check_image, Activation, Node, NodeId, StreamOutput, StreamStep, TdnnGraph};
use crate::{Error, Result};

/// A fixed-point word, sign-extended into an `i64`.
pub type FxWord = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxFormat {
    /// Total bits including sign.
    pub n: u32,
    /// Fractional bits.
    pub m: u32,
}

impl Default for FxFormat {
    fn default() -> Self {
        Self { n: 16, m: 7 }
    }
}

impl FxFormat {
    pub const MAX_BITS: u32 = 32;

    pub fn new(n: u32, m: u32) -> Result<Self> {
        if !(1..=Self::MAX_BITS).contains(&n) || m == 0 || m >= n {
            return Err(Error::Config(alloc::format!(
                "fixed-point format needs 1 <= m < n <= {}, got n={n} m={m}",
                Self::MAX_BITS
            )));
        }
        Ok(Self { n, m })
    }

    pub fn min_word(self) -> FxWord {
        -(1i64 << (self.n - 1))
    }

    pub fn max_word(self) -> FxWord {
        (1i64 << (self.n - 1)) - 1
    }

    /// Weight of one least significant bit.
    pub fn resolution(self) -> f64 {
        1.0 / (1u64 << self.m) as f64
    }

    /// Clock cycles per raster sample.
    pub fn period(self) -> u64 {
        2 * self.n as u64
    }

    /// Nearest representable word (ties to even), saturated. NaN maps to 0.
    pub fn quantize(self, x: f64) -> FxWord {
        if x.is_nan() {
            return 0;
        }
        let scaled = round_ties_even(x * (1u64 << self.m) as f64);
        if scaled <= self.min_word() as f64 {
            self.min_word()
        } else if scaled >= self.max_word() as f64 {
            self.max_word()
        } else {
            scaled as FxWord
        }
    }

    pub fn dequantize(self, w: FxWord) -> f64 {
        w as f64 * self.resolution()
    }

    /// `x` rounded onto the representable grid.
    pub fn snap(self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    pub fn is_representable(self, x: f64) -> bool {
        self.snap(x) == x
    }

    /// Low `n` bits of `v`, sign-extended.
    pub fn wrap(self, v: i64) -> FxWord {
        let shift = 64 - self.n;
        (v << shift) >> shift
    }

    /// Low `n` bits as an unsigned pattern.
    pub fn bits(self, w: FxWord) -> u64 {
        (w as u64) & ((1u64 << self.n) - 1)
    }
}

/// Product of two words: exact product, arithmetic shift right by `m`,
/// wrapped to `n` bits.
pub fn fx_multiply(fmt: FxFormat, a: FxWord, b: FxWord) -> FxWord {
    fmt.wrap((a * b) >> fmt.m)
}

/// Word-level form of one node, with parameters already quantized.
#[derive(Debug, Clone)]
enum FxOp {
    Input(usize),
    Delay(NodeId),
    Synapse(FxWord, NodeId),
    /// Inputs, which inputs are unit-weight edges, bias, ReLU.
    Neuron(Vec<NodeId>, Vec<bool>, FxWord, bool),
    Max(Vec<NodeId>),
    Output(NodeId),
}

fn compile(g: &TdnnGraph, fmt: FxFormat) -> Vec<FxOp> {
    g.nodes
        .iter()
        .map(|n| match n {
            Node::InputTap { channel } => FxOp::Input(*channel),
            Node::Delay { source } => FxOp::Delay(*source),
            Node::Synapse { weight, source } => FxOp::Synapse(fmt.quantize(*weight), *source),
            Node::Neuron {
                inputs,
                bias,
                activation,
            } => FxOp::Neuron(
                inputs.clone(),
                inputs
                    .iter()
                    .map(|&i| !matches!(g.nodes[i], Node::Synapse { .. }))
                    .collect(),
                fmt.quantize(*bias),
                *activation == Activation::Relu,
            ),
            Node::Max { sources } => FxOp::Max(sources.clone()),
            Node::Output { source, .. } => FxOp::Output(*source),
        })
        .collect()
}

fn quantize_image(image: &FeatureMap, fmt: FxFormat) -> Vec<FxWord> {
    image.data().iter().map(|&x| fmt.quantize(x)).collect()
}

/// Copy of `g` with every weight and bias snapped onto the `fmt` grid.
pub fn quantize_graph(g: &TdnnGraph, fmt: FxFormat) -> TdnnGraph {
    let mut q = g.clone();
    for node in &mut q.nodes {
        match node {
            Node::Synapse { weight, .. } => *weight = fmt.snap(*weight),
            Node::Neuron { bias, .. } => *bias = fmt.snap(*bias),
            _ => {}
        }
    }
    q
}

/// Rescales layer outputs by powers of two so fixed-point words use their
/// range.
///
/// Every weighted layer but the last gets an output scale `2^k`, the largest
/// that keeps its peak magnitude over `calibration` within
/// `2^(n-m-1-headroom_bits)` and its weights representable; the next weighted
/// layer divides it back out. Positive scales commute with ReLU and max
/// pooling and powers of two are exact in binary, so the function is
/// unchanged while small intermediate values stop losing bits to product
/// truncation.
pub fn rescale_for_format(
    net: &NetworkSpec,
    calibration: &[FeatureMap],
    fmt: FxFormat,
    headroom_bits: u32,
) -> Result<NetworkSpec> {
    net.validate()?;
    let mut peaks = vec![0.0f64; net.layers.len()];
    for image in calibration {
        let acts = net.forward_all(image)?;
        for (peak, act) in peaks.iter_mut().zip(&acts[1..]) {
            *peak = act.data().iter().fold(*peak, |p, v| p.max(v.abs()));
        }
    }
    let int_bits = fmt.n as i32 - fmt.m as i32 - 1;
    let limit = int_bits - headroom_bits as i32;
    let last = net.layers.iter().rposition(|l| l.weights.is_some());
    let mut out = net.clone();
    let mut input_exp = 0i32;
    for (index, layer) in out.layers.iter_mut().enumerate() {
        let Some(w) = &mut layer.weights else {
            continue;
        };
        let exp = if Some(index) == last || peaks[index] == 0.0 {
            0
        } else {
            // Largest k with peak * 2^k <= 2^limit.
            let mut k = limit - libm::ceil(libm::log2(peaks[index])) as i32;
            let w_peak = w.data().iter().fold(0.0f64, |p, v| p.max(v.abs()));
            let b_peak = layer
                .bias
                .iter()
                .flatten()
                .fold(0.0f64, |p, v| p.max(v.abs()));
            let fits = |k: i32| {
                w_peak * libm::ldexp(1.0, k - input_exp) < libm::ldexp(1.0, int_bits - 1)
                    && b_peak * libm::ldexp(1.0, k) < libm::ldexp(1.0, int_bits - 1)
            };
            while k > -64 && !fits(k) {
                k -= 1;
            }
            k
        };
        w.data_mut()
            .iter_mut()
            .for_each(|v| *v = libm::ldexp(*v, exp - input_exp));
        if let Some(b) = &mut layer.bias {
            b.iter_mut().for_each(|v| *v = libm::ldexp(*v, exp));
        }
        input_exp = exp;
    }
    Ok(out)
}

/// A graph compiled for repeated word-level evaluation in one format.
pub struct FxProgram<'g> {
    graph: &'g TdnnGraph,
    fmt: FxFormat,
    ops: Vec<FxOp>,
    delays: Vec<(NodeId, NodeId)>,
}

impl<'g> FxProgram<'g> {
    pub fn new(graph: &'g TdnnGraph, fmt: FxFormat) -> Self {
        let ops = compile(graph, fmt);
        let delays = ops
            .iter()
            .enumerate()
            .filter_map(|(id, op)| match op {
                FxOp::Delay(src) => Some((id, *src)),
                _ => None,
            })
            .collect();
        Self {
            graph,
            fmt,
            ops,
            delays,
        }
    }

    /// Streams one image. With `valid_only`, a stage's arithmetic is skipped
    /// on steps where its own output is masked; such steps never feed a valid
    /// downstream output, so valid outputs are unchanged while masked ones
    /// are unspecified.
    pub fn run(&self, image: &FeatureMap, valid_only: bool) -> Result<StreamOutput<FxWord>> {
        let g = self.graph;
        let fmt = self.fmt;
        check_image(g, image)?;
        let pixels = quantize_image(image, fmt);
        let plane = g.raster_len();
        let width = g.raster_width();
        let mut values = vec![0 as FxWord; self.ops.len()];
        let mut state = vec![0 as FxWord; self.ops.len()];
        let mut active = vec![true; g.stages.len()];
        let mut steps = Vec::with_capacity(plane);
        for t in 0..plane {
            if valid_only {
                for (a, st) in active.iter_mut().zip(&g.stages) {
                    *a = st.output.position(t, width).is_some();
                }
            }
            for id in 0..self.ops.len() {
                let op = &self.ops[id];
                if valid_only && !matches!(op, FxOp::Delay(_) | FxOp::Input(_) | FxOp::Output(_)) {
                    if let Some(k) = g.node_stage[id] {
                        if !active[k] {
                            continue;
                        }
                    }
                }
                values[id] = match op {
                    FxOp::Input(c) => pixels[c * plane + t],
                    FxOp::Delay(_) => state[id],
                    FxOp::Synapse(w, src) => fx_multiply(fmt, *w, values[*src]),
                    FxOp::Neuron(inputs, _, bias, relu) => {
                        let sum = fmt.wrap(inputs.iter().fold(*bias, |acc, &s| acc + values[s]));
                        if *relu && sum < 0 {
                            0
                        } else {
                            sum
                        }
                    }
                    FxOp::Max(srcs) => srcs.iter().map(|&s| values[s]).max().unwrap_or(0),
                    FxOp::Output(src) => values[*src],
                };
            }
            for &(id, src) in &self.delays {
                state[id] = values[src];
            }
            steps.push(StreamStep {
                t,
                position: g.output_geometry.position(t, width),
                values: g.outputs.iter().map(|&o| values[o]).collect(),
            });
        }
        Ok(StreamOutput { steps })
    }

    pub fn predict(&self, image: &FeatureMap) -> Result<usize> {
        let out = self.run(image, true)?;
        predict_words(&out).ok_or_else(|| Error::Shape("graph has no valid output step".into()))
    }
}

/// Streams an image through the graph in fixed point, evaluating every node
/// on every raster step. Output values are raw words.
pub fn fx_forward(
    g: &TdnnGraph,
    image: &FeatureMap,
    fmt: FxFormat,
) -> Result<StreamOutput<FxWord>> {
    FxProgram::new(g, fmt).run(image, false)
}

/// Class predicted from the last valid output step, or `None` if the graph
/// never produces one.
pub fn predict_words(out: &StreamOutput<FxWord>) -> Option<usize> {
    let last = out.valid_steps().last()?;
    let as_f: Vec<f64> = last.values.iter().map(|&w| w as f64).collect();
    Some(argmax(&as_f))
}

/// Fixed-point classification of one image.
pub fn fx_predict(g: &TdnnGraph, image: &FeatureMap, fmt: FxFormat) -> Result<usize> {
    FxProgram::new(g, fmt).predict(image)
}

/// Receives every node's output bit on every cycle.
pub trait TraceSink {
    fn bit(&mut self, cycle: u64, node: NodeId, bit: bool);
}

/// Timing summary of one cycle simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleTrace {
    pub format: FxFormat,
    /// Cycles per raster sample.
    pub period: u64,
    pub pipeline_stages: usize,
    pub total_cycles: u64,
    /// Cycles over which the input stream is presented.
    pub input_cycles: u64,
    /// Cycle on which the first bit of raster sample `t` enters.
    pub input_sample_start: Vec<u64>,
    /// Number of delay-element shifts in each phase of the period.
    pub delay_shifts_by_phase: Vec<u64>,
    /// Number of synapse accumulator resets in each phase of the period.
    pub synapse_starts_by_phase: Vec<u64>,
    /// Cycle on which the first bit of the first valid output leaves.
    pub first_valid_output_cycle: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleResult {
    pub outputs: StreamOutput<FxWord>,
    pub trace: CycleTrace,
}

#[derive(Debug, Clone, Default)]
struct BitState {
    /// Delay shift register, synapse accumulator, or neuron alignment register.
    reg: i64,
    /// Synapse sign latch, neuron sign latch.
    latch: bool,
    /// Neuron serial-adder carry.
    carry: i64,
    /// Max node captured words; neuron alignment registers of unit-weight
    /// inputs.
    captured: Vec<u64>,
}

/// Clock-by-clock simulation of the bit-serial datapath.
pub fn cycle_simulate(g: &TdnnGraph, image: &FeatureMap, fmt: FxFormat) -> Result<CycleResult> {
    cycle_simulate_traced(g, image, fmt, None)
}

/// [`cycle_simulate`] reporting every output bit to `sink`.
pub fn cycle_simulate_traced(
    g: &TdnnGraph,
    image: &FeatureMap,
    fmt: FxFormat,
    mut sink: Option<&mut dyn TraceSink>,
) -> Result<CycleResult> {
    check_image(g, image)?;
    let ops = compile(g, fmt);
    let pixels = quantize_image(image, fmt);
    let n = fmt.n as u64;
    let m = fmt.m as u64;
    let period = fmt.period();
    let plane = g.raster_len();
    let width = g.raster_width();
    let depth = g.pipeline_depth();
    let periods = (plane + depth) as u64;
    let align = (2 * n - m) as u32;

    // Stage k (1-based) emits raster sample t in period t + k; it is held in
    // reset until its first sample arrives.
    let lag: Vec<u64> = g
        .node_stage
        .iter()
        .map(|s| s.map_or(0, |k| k as u64 + 1))
        .collect();
    let mut state: Vec<BitState> = ops
        .iter()
        .map(|op| BitState {
            captured: match op {
                FxOp::Max(srcs) => vec![0; srcs.len()],
                FxOp::Neuron(inputs, ..) => vec![0; inputs.len()],
                _ => Vec::new(),
            },
            ..BitState::default()
        })
        .collect();
    let mut out = vec![false; ops.len()];
    let mut words = vec![vec![0u64; g.outputs.len()]; plane];
    let mut delay_shifts = vec![0u64; period as usize];
    let mut synapse_starts = vec![0u64; period as usize];
    let output_index: Vec<Option<usize>> = {
        let mut v = vec![None; ops.len()];
        for (i, &o) in g.outputs.iter().enumerate() {
            v[o] = Some(i);
        }
        v
    };

    for p in 0..periods {
        for phase in 0..period {
            let cycle = p * period + phase;
            let word_phase = phase < n;
            for id in 0..ops.len() {
                let st = &mut state[id];
                let bit = match &ops[id] {
                    FxOp::Input(c) => {
                        let t = p as usize;
                        word_phase
                            && t < plane
                            && (fmt.bits(pixels[c * plane + t]) >> phase) & 1 == 1
                    }
                    FxOp::Delay(src) => {
                        if word_phase {
                            let b = st.reg & 1 == 1;
                            st.reg = (st.reg >> 1) | ((out[*src] as i64) << (n - 1));
                            delay_shifts[phase as usize] += 1;
                            b
                        } else {
                            false
                        }
                    }
                    FxOp::Synapse(w, src) => {
                        if phase == 0 {
                            st.reg = 0;
                            synapse_starts[0] += 1;
                        }
                        let x = if word_phase { out[*src] } else { st.latch };
                        if phase == n - 1 {
                            st.latch = x;
                        }
                        let s = st.reg + if x { *w } else { 0 };
                        st.reg = s >> 1;
                        s & 1 == 1
                    }
                    FxOp::Neuron(inputs, direct, bias, relu) => {
                        let live = p >= lag[id];
                        let emitted = st.reg & 1 == 1;
                        let b = live && word_phase && emitted && !(*relu && st.latch);
                        if phase == m {
                            st.carry = 0;
                        }
                        // A unit-weight input is its source stream delayed by
                        // m cycles, the same alignment a product has.
                        let mut ones = 0i64;
                        for ((&k, &d), reg) in inputs.iter().zip(direct).zip(st.captured.iter_mut())
                        {
                            if d {
                                *reg = ((*reg << 1) | out[k] as u64) & ((1u64 << (m + 1)) - 1);
                                ones += ((*reg >> m) & 1) as i64;
                            } else {
                                ones += out[k] as i64;
                            }
                        }
                        let sum_bit = if (m..m + n).contains(&phase) {
                            let j = phase - m;
                            let mut s = st.carry + ((fmt.bits(*bias) >> j) & 1) as i64;
                            s += ones;
                            st.carry = s >> 1;
                            let sb = s & 1 == 1;
                            if j == n - 1 {
                                st.latch = sb;
                            }
                            sb
                        } else {
                            false
                        };
                        st.reg = (st.reg >> 1) | ((sum_bit as i64) << (align - 1));
                        b
                    }
                    FxOp::Max(srcs) => {
                        let live = p >= lag[id];
                        let b = live && word_phase && (st.reg >> phase) & 1 == 1;
                        if word_phase {
                            if phase == 0 {
                                st.captured.iter_mut().for_each(|c| *c = 0);
                            }
                            for (c, &s) in st.captured.iter_mut().zip(srcs) {
                                *c |= (out[s] as u64) << phase;
                            }
                            if phase == n - 1 {
                                let best = st
                                    .captured
                                    .iter()
                                    .map(|&c| fmt.wrap(c as i64))
                                    .max()
                                    .unwrap_or(0);
                                st.reg = fmt.bits(best) as i64;
                            }
                        }
                        b
                    }
                    FxOp::Output(src) => {
                        let b = out[*src];
                        if word_phase && p >= depth as u64 && b {
                            let t = (p - depth as u64) as usize;
                            words[t][output_index[id].expect("output port")] |= 1 << phase;
                        }
                        b
                    }
                };
                out[id] = bit;
                if let Some(s) = sink.as_deref_mut() {
                    s.bit(cycle, id, bit);
                }
            }
        }
    }

    let steps = words
        .into_iter()
        .enumerate()
        .map(|(t, ws)| StreamStep {
            t,
            position: g.output_geometry.position(t, width),
            values: ws.into_iter().map(|w| fmt.wrap(w as i64)).collect(),
        })
        .collect::<Vec<_>>();
    let first_valid_output_cycle = steps
        .iter()
        .find(|s| s.valid())
        .map(|s| (s.t as u64 + depth as u64) * period);
    let trace = CycleTrace {
        format: fmt,
        period,
        pipeline_stages: depth,
        total_cycles: periods * period,
        input_cycles: plane as u64 * period,
        input_sample_start: (0..plane as u64).map(|t| t * period).collect(),
        delay_shifts_by_phase: delay_shifts,
        synapse_starts_by_phase: synapse_starts,
        first_valid_output_cycle,
    };
    Ok(CycleResult {
        outputs: StreamOutput { steps },
        trace,
    })
}

/// Bit-serial multiplication of two words through the same
/// serial/parallel multiplier the cycle model uses: `x` streamed LSB first and
/// sign-extended to `2n` bits, `w` held in parallel.
pub fn serial_multiply(fmt: FxFormat, w: FxWord, x: FxWord) -> FxWord {
    let n = fmt.n as u64;
    let xb = fmt.bits(x);
    let mut acc: i64 = 0;
    let mut product: u64 = 0;
    for k in 0..2 * n {
        let bit = if k < n {
            (xb >> k) & 1 == 1
        } else {
            (xb >> (n - 1)) & 1 == 1
        };
        let s = acc + if bit { w } else { 0 };
        product |= ((s & 1) as u64) << k;
        acc = s >> 1;
    }
    fmt.wrap((product >> fmt.m) as i64)
}

// SPDX-License-Identifier: Apache-2.0

//! Netlist, graph and resource-report output for a built [`TdnnGraph`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::fxsim::FxFormat;
use crate::tdnn::{Activation, Node, NodeId, StageKind, TdnnGraph};
use crate::{Error, Result};

/// Behavioural models of the primitives instantiated by [`emit_netlist`].
pub const PRIMITIVES: &str = r#"// Bit-serial primitives. Words are N-bit two's complement, LSB first in
// phases 0..N-1 of a 2N-cycle period.

module tdnn_valid_gen #(parameter N = 16, STAGES = 1, W = 1, H = 1, OY = 0, OX = 0, STEP = 1) (
  input wire clk, input wire rst,
  output reg [$clog2(2*N)-1:0] phase,
  output wire [STAGES:0] live,
  output wire out_valid
);
  reg [31:0] period;
  always @(posedge clk) begin
    if (rst) begin phase <= 0; period <= 0; end
    else if (phase == 2*N-1) begin phase <= 0; period <= period + 1; end
    else phase <= phase + 1;
  end
  genvar k;
  generate for (k = 0; k <= STAGES; k = k + 1) begin : g_live
    assign live[k] = !rst && period >= k;
  end endgenerate
  wire [31:0] t = period - STAGES;
  wire [31:0] y = t / W, x = t % W;
  assign out_valid = period >= STAGES && t < W*H && y >= OY && x >= OX
                     && (y-OY) % STEP == 0 && (x-OX) % STEP == 0;
endmodule

module tdnn_input_tap #(parameter N = 16) (
  input wire [$clog2(2*N)-1:0] phase, input wire d, output wire q
);
  assign q = phase < N ? d : 1'b0;
endmodule

module tdnn_delay_chain #(parameter N = 16, LENGTH = 1) (
  input wire clk, input wire [$clog2(2*N)-1:0] phase,
  input wire d, output wire [LENGTH-1:0] q
);
  reg [N-1:0] r [0:LENGTH-1];
  genvar k;
  generate for (k = 0; k < LENGTH; k = k + 1) begin : g_el
    wire din = k == 0 ? d : r[k-1][0];
    assign q[k] = phase < N ? r[k][0] : 1'b0;
    always @(posedge clk) if (phase < N) r[k] <= {din, r[k][N-1:1]};
  end endgenerate
endmodule

module tdnn_synapse #(parameter N = 16, M = 7, WEIGHT = 0) (
  input wire clk, input wire [$clog2(2*N)-1:0] phase, input wire x, output wire p
);
  reg signed [N:0] acc;
  reg sign;
  wire xb = phase < N ? x : sign;
  wire signed [N+1:0] s = (phase == 0 ? 0 : acc) + (xb ? $signed(WEIGHT) : 0);
  assign p = s[0];
  always @(posedge clk) begin
    acc <= s >>> 1;
    if (phase == N-1) sign <= xb;
  end
endmodule

module tdnn_neuron #(parameter N = 16, M = 7, K = 1, BIAS = 0, RELU = 0) (
  input wire clk, input wire [$clog2(2*N)-1:0] phase, input wire live,
  input wire [K-1:0] p, output wire y
);
  localparam L = 2*N - M;
  reg [L-1:0] align;
  reg [$clog2(K+2):0] carry;
  reg sign;
  wire active = phase >= M && phase < M + N;
  wire [N-1:0] bias_bits = BIAS;
  wire bias_bit = active ? bias_bits[phase - M] : 1'b0;
  wire [$clog2(K+2)+1:0] s = (phase == M ? 0 : carry) + $countones(p & {K{active}}) + bias_bit;
  wire sum_bit = active & s[0];
  assign y = live && phase < N && align[0] && !(RELU && sign);
  always @(posedge clk) begin
    carry <= s >> 1;
    align <= {sum_bit, align[L-1:1]};
    if (phase == M + N - 1) sign <= sum_bit;
  end
endmodule

module tdnn_max #(parameter N = 16, K = 1) (
  input wire clk, input wire [$clog2(2*N)-1:0] phase, input wire live,
  input wire [K-1:0] d, output wire y
);
  reg [N-1:0] cap [0:K-1];
  reg [N-1:0] hold;
  reg signed [N-1:0] best;
  integer k;
  assign y = live && phase < N && hold[phase];
  always @(posedge clk) if (phase < N) begin
    for (k = 0; k < K; k = k + 1) cap[k][phase] <= d[k];
    if (phase == N-1) begin
      best = {d[0], cap[0][N-2:0]};
      for (k = 1; k < K; k = k + 1)
        if ($signed({d[k], cap[k][N-2:0]}) > best) best = {d[k], cap[k][N-2:0]};
      hold <= best;
    end
  end
endmodule

// Unit-weight connection: the source stream delayed to product alignment.
module tdnn_align #(parameter M = 7) (input wire clk, input wire d, output wire q);
  reg [M-1:0] r;
  assign q = r[M-1];
  always @(posedge clk) r <= (r << 1) | d;
endmodule

module tdnn_output_port (input wire d, output wire q);
  assign q = d;
endmodule
"#;

fn word_literal(fmt: FxFormat, word: i64) -> String {
    let digits = (fmt.n as usize).div_ceil(4);
    format!("{}'sh{:0width$x}", fmt.n, fmt.bits(word), width = digits)
}

fn quantized(fmt: FxFormat, node: NodeId, value: f64) -> Result<i64> {
    if !fmt.is_representable(value) {
        return Err(Error::Unquantized {
            node,
            value,
            n: fmt.n,
            m: fmt.m,
        });
    }
    Ok(fmt.quantize(value))
}

/// Wire expression carrying each node's output.
fn wire_names(g: &TdnnGraph) -> Vec<String> {
    let mut names: Vec<String> = (0..g.nodes.len()).map(|id| format!("n{id}")).collect();
    for (si, stage) in g.stages.iter().enumerate() {
        for (ci, chain) in stage.delay_chains.iter().enumerate() {
            for (k, &el) in chain.elements.iter().enumerate() {
                names[el] = format!("d{si}_{ci}[{k}]");
            }
        }
    }
    names
}

/// Structural Verilog for `g`. Every weight and bias must already lie on the
/// `fmt` grid (see [`crate::fxsim::quantize_graph`]).
pub fn emit_netlist(g: &TdnnGraph, fmt: FxFormat) -> Result<String> {
    let mut weights = vec![0i64; g.nodes.len()];
    for (id, node) in g.nodes.iter().enumerate() {
        match node {
            Node::Synapse { weight, .. } => weights[id] = quantized(fmt, id, *weight)?,
            Node::Neuron { bias, .. } => weights[id] = quantized(fmt, id, *bias)?,
            _ => {}
        }
    }
    let names = wire_names(g);
    let (n, m) = (fmt.n, fmt.m);
    let og = g.output_geometry;
    let mut v = String::new();
    v.push_str(PRIMITIVES);
    let _ = writeln!(v);
    let _ = writeln!(
        v,
        "// input {}x{}x{}, {} stages, {} synapses, {} delay elements",
        g.input_dims.c,
        g.input_dims.h,
        g.input_dims.w,
        g.pipeline_depth(),
        g.synapse_count(),
        g.delay_count()
    );
    let _ = writeln!(v, "module tdnn_top (");
    let _ = writeln!(v, "  input wire clk, input wire rst,");
    let _ = writeln!(v, "  input wire [{}:0] in_bits,", g.inputs.len() - 1);
    let _ = writeln!(v, "  output wire [{}:0] out_bits,", g.outputs.len() - 1);
    let _ = writeln!(v, "  output wire out_valid");
    let _ = writeln!(v, ");");
    let _ = writeln!(v, "  wire [$clog2({}):0] phase;", 2 * n - 1);
    let _ = writeln!(v, "  wire [{}:0] live;", g.pipeline_depth());
    let _ = writeln!(
        v,
        "  tdnn_valid_gen #(.N({n}), .STAGES({}), .W({}), .H({}), .OY({}), .OX({}), .STEP({})) u_valid (.clk(clk), .rst(rst), .phase(phase), .live(live), .out_valid(out_valid));",
        g.pipeline_depth(),
        g.input_dims.w,
        g.input_dims.h,
        og.offset_y,
        og.offset_x,
        og.step
    );
    for (id, node) in g.nodes.iter().enumerate() {
        match node {
            Node::InputTap { channel } => {
                let _ = writeln!(v, "  wire n{id};");
                let _ = writeln!(
                    v,
                    "  tdnn_input_tap #(.N({n})) u_n{id} (.phase(phase), .d(in_bits[{channel}]), .q(n{id}));"
                );
            }
            Node::Delay { .. } => {}
            Node::Synapse { source, .. } => {
                let _ = writeln!(v, "  wire n{id};");
                let _ = writeln!(
                    v,
                    "  tdnn_synapse #(.N({n}), .M({m}), .WEIGHT({})) u_n{id} (.clk(clk), .phase(phase), .x({}), .p(n{id}));",
                    word_literal(fmt, weights[id]),
                    names[*source]
                );
            }
            Node::Neuron {
                inputs, activation, ..
            } => {
                let stage = g.node_stage[id].expect("neuron belongs to a stage") + 1;
                let mut ins = Vec::with_capacity(inputs.len());
                for (k, &s) in inputs.iter().enumerate() {
                    if matches!(g.nodes[s], Node::Synapse { .. }) {
                        ins.push(names[s].clone());
                    } else {
                        let _ = writeln!(v, "  wire a{id}_{k};");
                        let _ = writeln!(
                            v,
                            "  tdnn_align #(.M({m})) u_a{id}_{k} (.clk(clk), .d({}), .q(a{id}_{k}));",
                            names[s]
                        );
                        ins.push(format!("a{id}_{k}"));
                    }
                }
                if ins.is_empty() {
                    ins.push("1'b0".into());
                }
                ins.reverse();
                let _ = writeln!(v, "  wire n{id};");
                let _ = writeln!(
                    v,
                    "  tdnn_neuron #(.N({n}), .M({m}), .K({}), .BIAS({}), .RELU({})) u_n{id} (.clk(clk), .phase(phase), .live(live[{stage}]), .p({{{}}}), .y(n{id}));",
                    ins.len(),
                    word_literal(fmt, weights[id]),
                    (*activation == Activation::Relu) as u8,
                    ins.join(", ")
                );
            }
            Node::Max { sources } => {
                let stage = g.node_stage[id].expect("max belongs to a stage") + 1;
                let ins: Vec<&str> = sources.iter().rev().map(|&s| names[s].as_str()).collect();
                let _ = writeln!(v, "  wire n{id};");
                let _ = writeln!(
                    v,
                    "  tdnn_max #(.N({n}), .K({})) u_n{id} (.clk(clk), .phase(phase), .live(live[{stage}]), .d({{{}}}), .y(n{id}));",
                    sources.len(),
                    ins.join(", ")
                );
            }
            Node::Output { class, source } => {
                let _ = writeln!(
                    v,
                    "  tdnn_output_port u_n{id} (.d({}), .q(out_bits[{class}]));",
                    names[*source]
                );
            }
        }
        // Chains are declared right after their last element so that every
        // reference follows its declaration.
        for (si, stage) in g.stages.iter().enumerate() {
            for (ci, chain) in stage.delay_chains.iter().enumerate() {
                if chain.elements.last() == Some(&id) {
                    let len = chain.elements.len();
                    let _ = writeln!(v, "  wire [{}:0] d{si}_{ci};", len - 1);
                    let _ = writeln!(
                        v,
                        "  tdnn_delay_chain #(.N({n}), .LENGTH({len})) u_d{si}_{ci} (.clk(clk), .phase(phase), .d({}), .q(d{si}_{ci}));",
                        names[chain.source]
                    );
                }
            }
        }
    }
    let _ = writeln!(v, "endmodule");
    Ok(v)
}

fn weight_color(w: f64, max_abs: f64) -> String {
    if w == 1.0 {
        return "#000000".into();
    }
    if w == 0.0 {
        return "#bfbfbf".into();
    }
    let intensity = if max_abs > 0.0 {
        (w.abs() / max_abs).min(1.0)
    } else {
        0.0
    };
    let fade = (255.0 * (1.0 - 0.25 - 0.75 * intensity)) as u8;
    if w >= 0.0 {
        format!("#ff{fade:02x}{fade:02x}")
    } else {
        format!("#{fade:02x}{fade:02x}ff")
    }
}

/// Graphviz rendering with synapses drawn as weighted edges: red for positive,
/// blue for negative, stronger colour for larger magnitude, grey for zero.
/// Unit weights, delays and pass-through connections are black.
pub fn emit_dot(g: &TdnnGraph) -> String {
    let max_abs = g
        .nodes
        .iter()
        .filter_map(|n| match n {
            Node::Synapse { weight, .. } => Some(weight.abs()),
            _ => None,
        })
        .fold(0.0, f64::max);
    let mut d = String::from("digraph tdnn {\n  rankdir=LR;\n  node [fontsize=10];\n");
    for (id, node) in g.nodes.iter().enumerate() {
        let attrs = match node {
            Node::InputTap { channel } => format!("label=\"in{channel}\", shape=invhouse"),
            Node::Synapse { .. } => continue,
            Node::Neuron {
                bias, activation, ..
            } => format!(
                "label=\"n{id}\\nb={bias:.4}{}\", shape=circle",
                if *activation == Activation::Relu {
                    "\\nrelu"
                } else {
                    ""
                }
            ),
            Node::Delay { .. } => format!("label=\"z{id}\", shape=box, width=0.3, height=0.3"),
            Node::Max { .. } => format!("label=\"max{id}\", shape=diamond"),
            Node::Output { class, .. } => format!("label=\"out{class}\", shape=house"),
        };
        let _ = writeln!(d, "  n{id} [{attrs}];");
    }
    for (id, node) in g.nodes.iter().enumerate() {
        match node {
            Node::Neuron { inputs, .. } => {
                for &s in inputs {
                    if let Node::Synapse { weight, source } = g.nodes[s] {
                        let _ = writeln!(
                            d,
                            "  n{source} -> n{id} [color=\"{}\", label=\"{weight:.4}\"];",
                            weight_color(weight, max_abs)
                        );
                    } else {
                        let _ = writeln!(d, "  n{s} -> n{id} [color=\"#000000\"];");
                    }
                }
            }
            Node::Delay { source } | Node::Output { source, .. } => {
                let _ = writeln!(d, "  n{source} -> n{id} [color=\"#000000\"];");
            }
            Node::Max { sources } => {
                for s in sources {
                    let _ = writeln!(d, "  n{s} -> n{id} [color=\"#000000\"];");
                }
            }
            _ => {}
        }
    }
    d.push_str("}\n");
    d
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub index: usize,
    pub kind: &'static str,
    pub layer_index: usize,
    pub units: usize,
    pub synapses: usize,
    pub vertical_delays: usize,
    pub horizontal_delays: usize,
    /// Raster step of the stage's first valid output.
    pub first_valid_step: usize,
}

/// Resource and timing summary of a graph in a given word format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceReport {
    pub format: FxFormat,
    pub synapses: usize,
    pub neurons: usize,
    pub max_units: usize,
    pub delay_elements: usize,
    pub delay_bits: usize,
    pub pipeline_stages: usize,
    pub first_valid_step: usize,
    pub first_valid_cycle: u64,
    pub cycles_per_sample: u64,
    pub cycles_per_image: u64,
    pub stages: Vec<StageReport>,
}

impl ResourceReport {
    /// Time to stream one image at `clock_mhz`, in microseconds.
    pub fn image_time_us(&self, clock_mhz: f64) -> f64 {
        self.cycles_per_image as f64 / clock_mhz
    }

    /// `key=value` lines, one per scalar field, then one line per stage.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_n={}", self.format.n);
        let _ = writeln!(s, "format_m={}", self.format.m);
        let _ = writeln!(s, "synapses={}", self.synapses);
        let _ = writeln!(s, "neurons={}", self.neurons);
        let _ = writeln!(s, "max_units={}", self.max_units);
        let _ = writeln!(s, "delay_elements={}", self.delay_elements);
        let _ = writeln!(s, "delay_bits={}", self.delay_bits);
        let _ = writeln!(s, "pipeline_stages={}", self.pipeline_stages);
        let _ = writeln!(s, "first_valid_step={}", self.first_valid_step);
        let _ = writeln!(s, "first_valid_cycle={}", self.first_valid_cycle);
        let _ = writeln!(s, "cycles_per_sample={}", self.cycles_per_sample);
        let _ = writeln!(s, "cycles_per_image={}", self.cycles_per_image);
        for st in &self.stages {
            let _ = writeln!(
                s,
                "stage.{}={} layer={} units={} synapses={} vertical_delays={} horizontal_delays={} first_valid_step={}",
                st.index,
                st.kind,
                st.layer_index,
                st.units,
                st.synapses,
                st.vertical_delays,
                st.horizontal_delays,
                st.first_valid_step
            );
        }
        s
    }

    /// Aligned table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 11] = [
            (
                "word format",
                format!(
                    "Q{}.{} ({} bits)",
                    self.format.n - self.format.m,
                    self.format.m,
                    self.format.n
                ),
            ),
            ("synapses", self.synapses.to_string()),
            ("neurons", self.neurons.to_string()),
            ("max units", self.max_units.to_string()),
            ("delay elements", self.delay_elements.to_string()),
            ("delay bits", self.delay_bits.to_string()),
            ("pipeline stages", self.pipeline_stages.to_string()),
            ("first valid step", self.first_valid_step.to_string()),
            ("first valid cycle", self.first_valid_cycle.to_string()),
            ("cycles per sample", self.cycles_per_sample.to_string()),
            ("cycles per image", self.cycles_per_image.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<20}{v:>14}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:>5}  {:<18}{:>6}{:>7}{:>10}{:>10}{:>10}{:>12}",
            "stage", "kind", "layer", "units", "synapses", "v.delay", "h.delay", "first valid"
        );
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:>5}  {:<18}{:>6}{:>7}{:>10}{:>10}{:>10}{:>12}",
                st.index,
                st.kind,
                st.layer_index,
                st.units,
                st.synapses,
                st.vertical_delays,
                st.horizontal_delays,
                st.first_valid_step
            );
        }
        s
    }
}

pub fn report_stats(g: &TdnnGraph, fmt: FxFormat) -> ResourceReport {
    let w = g.raster_width();
    let period = fmt.period();
    let stages = g
        .stages
        .iter()
        .enumerate()
        .map(|(index, st)| StageReport {
            index,
            kind: match st.kind {
                StageKind::Neurons(k) => k.name(),
                StageKind::MaxPool => "maxpool",
            },
            layer_index: st.layer_index,
            units: st.units.len(),
            synapses: st.synapses.len(),
            vertical_delays: st.vertical_delays,
            horizontal_delays: st.horizontal_delays,
            first_valid_step: st.output.first_valid(w),
        })
        .collect();
    let delay_elements = g.delay_count();
    ResourceReport {
        format: fmt,
        synapses: g.synapse_count(),
        neurons: g.neuron_count(),
        max_units: g.max_count(),
        delay_elements,
        delay_bits: delay_elements * fmt.n as usize,
        pipeline_stages: g.pipeline_depth(),
        first_valid_step: g.first_valid_step(),
        first_valid_cycle: (g.first_valid_step() + g.pipeline_depth()) as u64 * period,
        cycles_per_sample: period,
        cycles_per_image: g.raster_len() as u64 * period,
        stages,
    }
}

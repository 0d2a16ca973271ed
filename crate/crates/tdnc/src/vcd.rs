// SPDX-License-Identifier: Apache-2.0

//! Value-change-dump output of a cycle simulation, one 1-bit wire per node.

use std::io::{self, Write};

use tdnc_core::fxsim::TraceSink;
use tdnc_core::tdnn::{NodeId, TdnnGraph};

pub struct VcdWriter<W: Write> {
    out: W,
    last: Vec<Option<bool>>,
    time: Option<u64>,
    error: Option<io::Error>,
}

/// Short printable identifier for signal `i`.
fn code(mut i: usize) -> String {
    let mut s = String::new();
    loop {
        s.push((b'!' + (i % 94) as u8) as char);
        i /= 94;
        if i == 0 {
            return s;
        }
        i -= 1;
    }
}

impl<W: Write> VcdWriter<W> {
    pub fn new(mut out: W, g: &TdnnGraph) -> io::Result<Self> {
        writeln!(out, "$timescale 1ns $end")?;
        writeln!(out, "$scope module tdnn_top $end")?;
        for (id, node) in g.nodes.iter().enumerate() {
            writeln!(
                out,
                "$var wire 1 {} {}{} $end",
                code(id),
                node.kind_name(),
                id
            )?;
        }
        writeln!(out, "$upscope $end")?;
        writeln!(out, "$enddefinitions $end")?;
        Ok(Self {
            out,
            last: vec![None; g.nodes.len()],
            time: None,
            error: None,
        })
    }

    /// Flushes and returns the writer, or the first write error.
    pub fn finish(mut self) -> io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }

    fn record(&mut self, cycle: u64, node: NodeId, bit: bool) -> io::Result<()> {
        if self.last[node] == Some(bit) {
            return Ok(());
        }
        self.last[node] = Some(bit);
        if self.time != Some(cycle) {
            writeln!(self.out, "#{cycle}")?;
            self.time = Some(cycle);
        }
        writeln!(self.out, "{}{}", bit as u8, code(node))
    }
}

impl<W: Write> TraceSink for VcdWriter<W> {
    fn bit(&mut self, cycle: u64, node: NodeId, bit: bool) {
        if self.error.is_none() {
            if let Err(e) = self.record(cycle, node, bit) {
                self.error = Some(e);
            }
        }
    }
}

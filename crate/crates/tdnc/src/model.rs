// SPDX-License-Identifier: Apache-2.0

//! Line-oriented text format for networks. See `docs/model-format.md`.

use std::fmt::Write as _;
use std::path::Path;

use tdnc_core::factorizer::Ranks;
use tdnc_core::fxsim::FxFormat;
use tdnc_core::netir::{LayerKind, LayerSpec, MapDims, NetworkSpec, Pool};
use tdnc_core::tensor::Tensor4;

pub const HEADER: &str = "tdnc-model 1";
const VALUES_PER_LINE: usize = 8;

/// A network plus the word format it was quantized for, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: NetworkSpec,
    pub format: Option<FxFormat>,
}

impl Model {
    pub fn new(net: NetworkSpec) -> Self {
        Self { net, format: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {field}: {message}")]
    Syntax {
        line: usize,
        field: String,
        message: String,
    },
    #[error("invalid network: {0}")]
    Invalid(#[from] tdnc_core::Error),
}

fn syntax(line: usize, field: &str, message: impl Into<String>) -> ModelError {
    ModelError::Syntax {
        line,
        field: field.into(),
        message: message.into(),
    }
}

/// Ranks of a five-sub-layer group starting at `index`, if there is one.
fn factored_group(net: &NetworkSpec, index: usize) -> Option<Ranks> {
    use LayerKind::*;
    let kinds = [
        ChannelFilter,
        VerticalFilter,
        HorizontalFilter,
        CodeGeneration,
        InverseTransform,
    ];
    let group = net.layers.get(index..index + 5)?;
    if group.iter().zip(kinds).any(|(l, k)| l.kind != k) {
        return None;
    }
    let d = |i: usize| group[i].weights.as_ref().map(|w| w.dims());
    Some(Ranks::new(d(0)?[3], d(1)?[3], d(3)?[3]))
}

fn write_values(out: &mut String, values: &[f64]) {
    for chunk in values.chunks(VALUES_PER_LINE) {
        let line: Vec<String> = chunk.iter().map(|v| format!("{v:.8e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

pub fn to_text(model: &Model) -> String {
    let net = &model.net;
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    let d = net.input_dims;
    let _ = writeln!(out, "input {} {} {}", d.c, d.h, d.w);
    if let Some(f) = model.format {
        let _ = writeln!(out, "format {} {}", f.n, f.m);
    }
    for (i, layer) in net.layers.iter().enumerate() {
        let _ = writeln!(out, "layer {}", layer.kind);
        if let Some(r) = factored_group(net, i) {
            let _ = writeln!(out, "ranks {} {} {}", r.rc, r.rv, r.rf);
        }
        if let Some(w) = &layer.weights {
            let [a, b, c, e] = w.dims();
            let _ = writeln!(out, "dims {a} {b} {c} {e}");
            let _ = writeln!(out, "weights");
            write_values(&mut out, w.data());
        }
        if let Some(b) = &layer.bias {
            let _ = writeln!(out, "bias");
            write_values(&mut out, b);
        }
        if let Some(p) = layer.pool {
            let _ = writeln!(out, "pool {} {}", p.window, p.stride);
        }
        let _ = writeln!(out, "end");
    }
    out
}

struct Lines<'a> {
    lines: Vec<(usize, Vec<&'a str>)>,
    pos: usize,
    /// Line number of the last line consumed.
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                (
                    i + 1,
                    l.split('#')
                        .next()
                        .unwrap_or("")
                        .split_whitespace()
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, toks)| !toks.is_empty())
            .collect();
        Self {
            lines,
            pos: 0,
            last: 0,
        }
    }

    fn next_line(&mut self) -> Option<(usize, Vec<&'a str>)> {
        let l = self.lines.get(self.pos).cloned();
        if let Some((n, _)) = &l {
            self.pos += 1;
            self.last = *n;
        }
        l
    }

    fn peek_keyword(&self) -> Option<&'a str> {
        self.lines.get(self.pos).map(|(_, t)| t[0])
    }

    /// `count` numbers spread over as many lines as needed.
    fn values(&mut self, field: &str, count: usize) -> Result<Vec<f64>, ModelError> {
        // The count comes from the file; don't trust it for allocation.
        let mut out = Vec::with_capacity(count.min(1 << 16));
        while out.len() < count {
            let (line, toks) = self.next_line().ok_or_else(|| {
                syntax(
                    self.last,
                    field,
                    format!("expected {count} values, found {}", out.len()),
                )
            })?;
            for t in toks {
                if out.len() == count {
                    return Err(syntax(line, field, format!("more than {count} values")));
                }
                let v: f64 = t.parse().map_err(|_| {
                    syntax(
                        line,
                        field,
                        format!("`{t}` is not a number (value {})", out.len()),
                    )
                })?;
                if !v.is_finite() {
                    return Err(syntax(line, field, format!("non-finite value `{t}`")));
                }
                out.push(v);
            }
        }
        Ok(out)
    }
}

fn ints<const N: usize>(line: usize, field: &str, toks: &[&str]) -> Result<[usize; N], ModelError> {
    if toks.len() != N + 1 {
        return Err(syntax(
            line,
            field,
            format!("expected {N} integers, found {}", toks.len() - 1),
        ));
    }
    let mut out = [0; N];
    for (o, t) in out.iter_mut().zip(&toks[1..]) {
        *o = t
            .parse()
            .map_err(|_| syntax(line, field, format!("`{t}` is not a non-negative integer")))?;
    }
    Ok(out)
}

pub fn from_text(text: &str) -> Result<Model, ModelError> {
    let mut lines = Lines::new(text);
    match lines.next_line() {
        Some((_, toks)) if toks.join(" ") == HEADER => {}
        Some((line, _)) => return Err(syntax(line, "header", format!("expected `{HEADER}`"))),
        None => return Err(syntax(0, "header", "empty file")),
    }
    let (line, toks) = lines
        .next_line()
        .ok_or_else(|| syntax(lines.last, "input", "missing input line"))?;
    if toks[0] != "input" {
        return Err(syntax(
            line,
            "input",
            format!("expected `input C H W`, found `{}`", toks[0]),
        ));
    }
    let [c, h, w] = ints::<3>(line, "input", &toks)?;
    if c.checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .is_none_or(|x| x == 0)
    {
        return Err(syntax(line, "input", "dimensions must be positive"));
    }
    let mut format = None;
    if lines.peek_keyword() == Some("format") {
        let (line, toks) = lines.next_line().unwrap();
        let [n, m] = ints::<2>(line, "format", &toks)?;
        format = Some(
            FxFormat::new(n as u32, m as u32).map_err(|e| syntax(line, "format", e.to_string()))?,
        );
    }
    let mut layers = Vec::new();
    let mut pending_ranks: Vec<(usize, usize, Ranks)> = Vec::new();
    while let Some((line, toks)) = lines.next_line() {
        if toks[0] != "layer" || toks.len() != 2 {
            return Err(syntax(
                line,
                "layer",
                format!("expected `layer <kind>`, found `{}`", toks.join(" ")),
            ));
        }
        let kind = LayerKind::from_name(toks[1])
            .ok_or_else(|| syntax(line, "layer", format!("unknown layer kind `{}`", toks[1])))?;
        let start = line;
        let mut spec = LayerSpec {
            kind,
            weights: None,
            bias: None,
            pool: None,
        };
        loop {
            let (line, toks) = lines.next_line().ok_or_else(|| {
                syntax(
                    lines.last,
                    "end",
                    format!("layer at line {start} is not closed"),
                )
            })?;
            match toks[0] {
                "end" => break,
                "ranks" => {
                    if kind != LayerKind::ChannelFilter {
                        return Err(syntax(
                            line,
                            "ranks",
                            "only a channel_filter layer can carry ranks",
                        ));
                    }
                    let [rc, rv, rf] = ints::<3>(line, "ranks", &toks)?;
                    pending_ranks.push((layers.len(), line, Ranks::new(rc, rv, rf)));
                }
                "dims" => {
                    if !kind.is_weighted() {
                        return Err(syntax(
                            line,
                            "dims",
                            format!("{kind} layers have no weights"),
                        ));
                    }
                    let dims = ints::<4>(line, "dims", &toks)?;
                    if lines.next_line().map(|(_, t)| t) != Some(vec!["weights"]) {
                        return Err(syntax(
                            lines.last,
                            "weights",
                            "`dims` must be followed by a `weights` line",
                        ));
                    }
                    let count = dims
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .filter(|&n| n > 0)
                        .ok_or_else(|| {
                            syntax(line, "dims", "dimensions must be positive and not overflow")
                        })?;
                    let values = lines.values("weights", count)?;
                    spec.weights = Some(
                        Tensor4::from_vec(dims, values)
                            .map_err(|e| syntax(line, "dims", e.to_string()))?,
                    );
                }
                "bias" => {
                    let features = spec
                        .weights
                        .as_ref()
                        .ok_or_else(|| syntax(line, "bias", "bias must follow weights"))?
                        .dims()[3];
                    spec.bias = Some(lines.values("bias", features)?);
                }
                "pool" => {
                    if kind != LayerKind::MaxPool {
                        return Err(syntax(line, "pool", "only maxpool layers take `pool`"));
                    }
                    let [window, stride] = ints::<2>(line, "pool", &toks)?;
                    spec.pool = Some(Pool { window, stride });
                }
                other => return Err(syntax(line, other, "unknown field")),
            }
        }
        if kind.is_weighted() && spec.weights.is_none() {
            return Err(syntax(
                start,
                "dims",
                format!("{kind} layer has no weights"),
            ));
        }
        if kind == LayerKind::MaxPool && spec.pool.is_none() {
            return Err(syntax(
                start,
                "pool",
                "maxpool layer needs `pool <window> <stride>`",
            ));
        }
        layers.push(spec);
    }
    if layers.is_empty() {
        return Err(syntax(lines.last, "layer", "model has no layers"));
    }
    let net = NetworkSpec::new(MapDims::new(c, h, w), layers);
    for (index, line, ranks) in pending_ranks {
        if factored_group(&net, index) != Some(ranks) {
            return Err(syntax(
                line,
                "ranks",
                format!(
                    "layers {}..{} are not a factored group with ranks {ranks:?}",
                    index,
                    index + 5
                ),
            ));
        }
    }
    net.validate()?;
    Ok(Model { net, format })
}

pub fn save_model(path: &Path, model: &Model) -> Result<(), ModelError> {
    std::fs::write(path, to_text(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_text(&text)
}

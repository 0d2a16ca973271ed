// SPDX-License-Identifier: Apache-2.0

//! End-to-end steps shared by the CLI and the acceptance suite.

use std::path::{Path, PathBuf};

use serde::Serialize;
use tdnc_core::factorizer::{compose, factorize_layer, select_ranks, Ranks};
use tdnc_core::finetune::{finetune, TrainConfig};
use tdnc_core::fxsim::{rescale_for_format, FxFormat, FxProgram};
use tdnc_core::netir::{argmax, Dataset, FeatureMap, LayerKind, NetworkSpec};
use tdnc_core::tdnn::{build_tdnn, stream_forward, TdnnGraph};
use tdnc_core::tensor::rel_frobenius_error;

use crate::idx::{assemble, load_idx_images, load_idx_labels, IdxError};

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// The last 5000 training images are held out for validation.
pub const VALIDATION_START: usize = 55_000;

pub struct MnistSplits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn mnist_paths(dir: &Path) -> [PathBuf; 4] {
    MNIST_FILES.map(|f| dir.join(f))
}

pub fn load_mnist(dir: &Path) -> Result<MnistSplits, IdxError> {
    let [ti, tl, si, sl] = mnist_paths(dir);
    let full = assemble(load_idx_images(&ti)?, load_idx_labels(&tl)?, 10)?;
    let test = assemble(load_idx_images(&si)?, load_idx_labels(&sl)?, 10)?;
    let split = VALIDATION_START.min(full.len() * 11 / 12);
    Ok(MnistSplits {
        train: full.slice(0..split),
        valid: full.slice(split..full.len()),
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankChoice {
    /// Smallest ranks whose relative error is at most this fraction.
    TargetError(f64),
    Ranks(Ranks),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFactorization {
    pub layer: usize,
    pub kind: &'static str,
    pub dims: [usize; 4],
    pub ranks: [usize; 3],
    pub rel_error: f64,
    pub params_before: usize,
    pub params_after: usize,
}

/// Replaces every conv and fully-connected layer by its five sub-layers.
pub fn factorize_network(
    net: &NetworkSpec,
    choice: RankChoice,
) -> tdnc_core::Result<(NetworkSpec, Vec<LayerFactorization>)> {
    net.validate()?;
    let mut out = net.clone();
    let mut report = Vec::new();
    // Back to front so earlier indices stay put as layers expand.
    for (index, layer) in net.layers.iter().enumerate().rev() {
        if !matches!(layer.kind, LayerKind::Conv | LayerKind::FullyConnected) {
            continue;
        }
        let chi = layer.weights.as_ref().expect("validated");
        let ranks = match choice {
            RankChoice::TargetError(t) => select_ranks(chi, t)?,
            RankChoice::Ranks(r) => {
                let [c, kh, kw, f] = chi.dims();
                // Explicit ranks are capped per layer so one triple can serve a whole network.
                let rc = r.rc.min(c).min(kh * kw * f);
                let rv = r.rv.min(rc * kh).min(kw * f);
                let rf = r.rf.min(rv * kw).min(f);
                Ranks::new(rc, rv, rf)
            }
        };
        let f = factorize_layer(chi, ranks)?;
        let rel_error = rel_frobenius_error(chi, &compose(&f)?)?;
        report.push(LayerFactorization {
            layer: index,
            kind: layer.kind.name(),
            dims: chi.dims(),
            ranks: [ranks.rc, ranks.rv, ranks.rf],
            rel_error,
            params_before: chi.len(),
            params_after: f.param_count(),
        });
        out = out.expand_factored(index, &f)?;
    }
    report.reverse();
    Ok((out, report))
}

/// Rounds every weight and bias onto the grid of `fmt`.
pub fn quantize_network(net: &NetworkSpec, fmt: FxFormat) -> NetworkSpec {
    let mut out = net.clone();
    for layer in &mut out.layers {
        if let Some(w) = &mut layer.weights {
            w.data_mut().iter_mut().for_each(|v| *v = fmt.snap(*v));
        }
        if let Some(b) = &mut layer.bias {
            b.iter_mut().for_each(|v| *v = fmt.snap(*v));
        }
    }
    out
}

/// Fraction of `data` where `predict` returns the label, images split across
/// the available cores.
pub fn accuracy_by<P>(data: &Dataset, predict: P) -> tdnc_core::Result<f64>
where
    P: Fn(&FeatureMap) -> tdnc_core::Result<usize> + Sync,
{
    if data.is_empty() {
        return Err(tdnc_core::Error::EmptyDataset);
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = data.len().div_ceil(threads);
    let counts = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .images
            .chunks(chunk)
            .zip(data.labels.chunks(chunk))
            .map(|(images, labels)| {
                let predict = &predict;
                s.spawn(move || {
                    let mut correct = 0usize;
                    for (image, &label) in images.iter().zip(labels) {
                        if predict(image)? == label {
                            correct += 1;
                        }
                    }
                    Ok::<_, tdnc_core::Error>(correct)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect::<tdnc_core::Result<Vec<_>>>()
    })?;
    Ok(counts.iter().sum::<usize>() as f64 / data.len() as f64)
}

pub fn float_accuracy(net: &NetworkSpec, data: &Dataset) -> tdnc_core::Result<f64> {
    accuracy_by(data, |image| net.predict(image))
}

/// Accuracy of the floating-point stream, read at the last valid step.
pub fn stream_accuracy(g: &TdnnGraph, data: &Dataset) -> tdnc_core::Result<f64> {
    accuracy_by(data, |image| {
        let out = stream_forward(g, image)?;
        let last = out
            .valid_steps()
            .last()
            .expect("a built graph has a valid step");
        Ok(argmax(&last.values))
    })
}

/// Post-implementation accuracy: word-level evaluation in `fmt`.
pub fn fx_accuracy(g: &TdnnGraph, data: &Dataset, fmt: FxFormat) -> tdnc_core::Result<f64> {
    let program = FxProgram::new(g, fmt);
    accuracy_by(data, |image| program.predict(image))
}

/// Bits of headroom left above the calibration peaks when rescaling.
pub const HEADROOM_BITS: u32 = 2;

/// The network as implemented in `fmt`: rescaled by powers of two against
/// `calibration` (skipped when empty), then built.
pub fn implement(
    net: &NetworkSpec,
    calibration: &[FeatureMap],
    fmt: FxFormat,
) -> tdnc_core::Result<(NetworkSpec, TdnnGraph)> {
    let scaled = if calibration.is_empty() {
        net.clone()
    } else {
        rescale_for_format(net, calibration, fmt, HEADROOM_BITS)?
    };
    let g = build_tdnn(&scaled)?;
    Ok((scaled, g))
}

/// One row of the approximation sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub target_error: f64,
    pub achieved_error: f64,
    pub ranks: Vec<[usize; 3]>,
    pub original: f64,
    pub post_approx: f64,
    pub post_tuning: f64,
    pub post_impl: f64,
    pub params: usize,
    pub delay_units: usize,
}

/// Factorizes `baseline` at `target`, fine-tunes on the training split, and
/// measures test accuracy after each step. `original` is the baseline's test
/// accuracy, passed in so a sweep computes it once. Returns the tuned
/// network as implemented.
pub fn sweep_row(
    baseline: &NetworkSpec,
    original: f64,
    splits: &MnistSplits,
    target: f64,
    train: &TrainConfig,
    fmt: FxFormat,
    calibration: &[FeatureMap],
) -> tdnc_core::Result<(SweepRow, NetworkSpec)> {
    let (factored, report) = factorize_network(baseline, RankChoice::TargetError(target))?;
    let post_approx = float_accuracy(&factored, &splits.test)?;
    let tuned = finetune(&factored, &splits.train, &splits.valid, train)?;
    let post_tuning = float_accuracy(&tuned, &splits.test)?;
    let (implemented, g) = implement(&tuned, calibration, fmt)?;
    let post_impl = fx_accuracy(&g, &splits.test, fmt)?;
    let row = SweepRow {
        target_error: target,
        achieved_error: report.iter().map(|r| r.rel_error).fold(0.0, f64::max),
        ranks: report.iter().map(|r| r.ranks).collect(),
        original,
        post_approx,
        post_tuning,
        post_impl,
        params: g.synapse_count(),
        delay_units: g.delay_count(),
    };
    Ok((row, implemented))
}

/// Text table with one line per row, columns as in the usual results table.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:>9} {:>9} {:>11} {:>11} {:>9} {:>7} {:>11}  ranks\n",
        "error", "original", "post-approx", "post-tuning", "post-imp", "params", "delay-units"
    );
    for r in rows {
        let ranks: Vec<String> = r
            .ranks
            .iter()
            .map(|[a, b, c]| format!("{a},{b},{c}"))
            .collect();
        out.push_str(&format!(
            "{:>8.0}% {:>9.4} {:>11.4} {:>11.4} {:>9.4} {:>7} {:>11}  {}\n",
            r.target_error * 100.0,
            r.original,
            r.post_approx,
            r.post_tuning,
            r.post_impl,
            r.params,
            r.delay_units,
            ranks.join(" ")
        ));
    }
    out
}

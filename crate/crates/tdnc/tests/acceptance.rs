// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the test
//! harness so the lines show up in ordinary `cargo test` output.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdnc::model::{from_text, to_text, Model};
use tdnc::pipeline::{float_accuracy, implement, load_mnist, sweep_row, MnistSplits, SweepRow};
use tdnc_core::emit::{emit_netlist, report_stats};
use tdnc_core::factorizer::{factorize_layer, feasible_ranks, Ranks};
use tdnc_core::finetune::{loss_and_gradients, train_baseline_softmax, TrainConfig};
use tdnc_core::fxsim::{
    cycle_simulate, fx_forward, fx_multiply, quantize_graph, serial_multiply, FxFormat,
};
use tdnc_core::netir::{Dataset, FeatureMap, LayerKind, LayerSpec, MapDims, NetworkSpec};
use tdnc_core::tdnn::{build_tdnn, stream_forward, TdnnGraph};
use tdnc_core::tensor::Tensor4;

const BASELINE_MIN_ACCURACY: f64 = 0.91;
const BASELINE_MAX_SECONDS: f64 = 300.0;
/// (target error, reference post-tuning accuracy)
const RECOVERY_TARGETS: [(f64, f64); 2] = [(0.31, 0.9154), (0.51, 0.8943)];
const RECOVERY_TOLERANCE: f64 = 0.02;
const FIXED_POINT_TOLERANCE: f64 = 0.01;
const EQUIVALENCE_MNIST_IMAGES: usize = 100;
const EQUIVALENCE_RANDOM_GRAPHS: u64 = 50;
const EQUIVALENCE_FORMATS: [(u32, u32); 3] = [(8, 4), (16, 7), (24, 12)];
const EQUIVALENCE_MAX_SECONDS: f64 = 600.0;
const CYCLES_PER_IMAGE: u64 = 25_088;
const IMAGE_MICROSECONDS: f64 = 156.8;
const CLOCK_MHZ: f64 = 160.0;
const STREAM_TOLERANCE: f64 = 1e-9;
const GRADIENT_TOLERANCE: f64 = 1e-4;

struct Verdicts {
    failed: usize,
}

impl Verdicts {
    fn record(&mut self, id: u32, name: &str, result: Result<String, String>) {
        match result {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL criterion {id} ({name}): {detail}");
            }
        }
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("TDNC_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn random_tensor(rng: &mut impl Rng, dims: [usize; 4], scale: f64) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-scale..scale)).unwrap()
}

fn random_image(rng: &mut impl Rng, dims: MapDims) -> FeatureMap {
    FeatureMap::from_vec(
        dims,
        (0..dims.len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Appends a `kind` layer of shape `dims`, factored at random feasible ranks.
fn push_factored(
    rng: &mut impl Rng,
    net: &mut NetworkSpec,
    kind: LayerKind,
    dims: [usize; 4],
) -> Ranks {
    let chi = random_tensor(rng, dims, 1.0);
    let all: Vec<_> = feasible_ranks(dims).collect();
    let ranks = all[rng.random_range(0..all.len())];
    let mut fl = factorize_layer(&chi, ranks).unwrap();
    fl.bias = Some((0..dims[3]).map(|_| rng.random_range(-0.5..0.5)).collect());
    net.layers.push(LayerSpec::weighted(kind, chi, None));
    let index = net.layers.len() - 1;
    *net = net.expand_factored(index, &fl).unwrap();
    ranks
}

/// Factored conv, optional ReLU and pooling, factored fully-connected head.
fn random_net(rng: &mut impl Rng) -> NetworkSpec {
    let c = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
    let mut net = NetworkSpec::new(MapDims::new(c, h, w), Vec::new());
    let dims = [
        c,
        rng.random_range(1..=h.min(3)),
        rng.random_range(1..=w.min(3)),
        rng.random_range(1..=3),
    ];
    push_factored(rng, &mut net, LayerKind::Conv, dims);
    if rng.random_bool(0.5) {
        net.layers.push(LayerSpec::relu());
    }
    let d = net.output_dims().unwrap();
    if d.h >= 2 && d.w >= 2 && rng.random_bool(0.6) {
        net.layers
            .push(LayerSpec::maxpool(2, rng.random_range(1..=2)));
    }
    let d = net.output_dims().unwrap();
    let classes = rng.random_range(1..=4);
    push_factored(
        rng,
        &mut net,
        LayerKind::FullyConnected,
        [d.c, d.h, d.w, classes],
    );
    net
}

/// Baseline conv network used only structurally; its weights are ingested
/// through the model text format.
fn convnet_fixture() -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let net = NetworkSpec::new(
        MapDims::new(1, 28, 28),
        vec![
            LayerSpec::weighted(
                LayerKind::Conv,
                random_tensor(&mut rng, [1, 5, 5, 4], 0.4),
                Some(vec![0.05; 4]),
            ),
            LayerSpec::relu(),
            LayerSpec::maxpool(2, 2),
            LayerSpec::weighted(
                LayerKind::Conv,
                random_tensor(&mut rng, [4, 5, 5, 8], 0.2),
                Some(vec![0.0; 8]),
            ),
            LayerSpec::relu(),
            LayerSpec::maxpool(2, 2),
            LayerSpec::weighted(
                LayerKind::FullyConnected,
                random_tensor(&mut rng, [8, 4, 4, 10], 0.2),
                Some(vec![0.0; 10]),
            ),
            LayerSpec::softmax(),
        ],
    );
    from_text(&to_text(&Model::new(net)))
        .expect("fixture ingests")
        .net
}

/// Cycle model against word-level evaluation on every valid step.
fn cycle_matches_fx(g: &TdnnGraph, image: &FeatureMap, fmt: FxFormat) -> Result<(), String> {
    let cyc = cycle_simulate(g, image, fmt).map_err(|e| e.to_string())?;
    let fx = fx_forward(g, image, fmt).map_err(|e| e.to_string())?;
    let a: Vec<_> = cyc.outputs.valid_steps().collect();
    let b: Vec<_> = fx.valid_steps().collect();
    check(
        !a.is_empty() && a == b,
        "cycle model and word-level outputs differ",
    )
}

/// Streamed logits against the frame forward pass at every valid step.
fn stream_matches_frame(net: &NetworkSpec, image: &FeatureMap) -> Result<f64, String> {
    let mut logits = net.clone();
    if logits.layers.last().map(|l| l.kind) == Some(LayerKind::Softmax) {
        logits.layers.pop();
    }
    let frame = logits.forward(image).map_err(|e| e.to_string())?;
    let g = build_tdnn(net).map_err(|e| e.to_string())?;
    let out = stream_forward(&g, image).map_err(|e| e.to_string())?;
    let d = frame.dims();
    let mut seen = vec![false; d.h * d.w];
    let mut worst = 0.0f64;
    for step in out.valid_steps() {
        let (y, x) = step.position.ok_or("valid step without position")?;
        seen[y * d.w + x] = true;
        for f in 0..d.c {
            let diff =
                (step.values[f] - frame.get(f, y, x)).abs() / frame.get(f, y, x).abs().max(1.0);
            worst = worst.max(diff);
        }
    }
    check(
        seen.iter().all(|&s| s),
        "some output positions never became valid",
    )?;
    Ok(worst)
}

struct MnistRun {
    splits: MnistSplits,
    baseline: NetworkSpec,
    original: f64,
    seconds: f64,
    rows: Vec<(SweepRow, NetworkSpec)>,
}

fn mnist_run() -> Result<MnistRun, String> {
    let dir = mnist_dir();
    let splits =
        load_mnist(&dir).map_err(|e| format!("MNIST unavailable at {} ({e})", dir.display()))?;
    let cfg = TrainConfig::default();
    let started = Instant::now();
    let baseline =
        train_baseline_softmax(&splits.train, &splits.valid, &cfg).map_err(|e| e.to_string())?;
    let seconds = started.elapsed().as_secs_f64();
    let original = float_accuracy(&baseline, &splits.test).map_err(|e| e.to_string())?;
    let fmt = FxFormat::default();
    let calibration = &splits.train.images[..1000];
    let mut rows = Vec::new();
    for (target, _) in RECOVERY_TARGETS {
        rows.push(
            sweep_row(&baseline, original, &splits, target, &cfg, fmt, calibration)
                .map_err(|e| e.to_string())?,
        );
    }
    Ok(MnistRun {
        splits,
        baseline,
        original,
        seconds,
        rows,
    })
}

fn criterion_1(run: &Result<MnistRun, String>) -> Result<String, String> {
    let run = run.as_ref().map_err(|e| e.clone())?;
    check(
        run.original >= BASELINE_MIN_ACCURACY,
        format!(
            "test accuracy {:.4} < {BASELINE_MIN_ACCURACY}",
            run.original
        ),
    )?;
    check(
        run.seconds <= BASELINE_MAX_SECONDS,
        format!(
            "training took {:.1} s > {BASELINE_MAX_SECONDS}",
            run.seconds
        ),
    )?;
    // The trained model survives the text format with identical decisions.
    let back = from_text(&to_text(&Model::new(run.baseline.clone())))
        .map_err(|e| e.to_string())?
        .net;
    let again = float_accuracy(&back, &run.splits.test).map_err(|e| e.to_string())?;
    check(
        again == run.original,
        format!("round-trip accuracy {again} != {}", run.original),
    )?;
    Ok(format!(
        "test accuracy {:.4} (reference 0.9234), {} train images, {:.1} s",
        run.original,
        run.splits.train.len(),
        run.seconds
    ))
}

fn criterion_2(run: &Result<MnistRun, String>) -> Result<String, String> {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let mut detail = Vec::new();
    for ((row, _), (target, reference)) in run.rows.iter().zip(RECOVERY_TARGETS) {
        let pct = target * 100.0;
        check(
            row.post_approx < row.original,
            format!(
                "{pct}%: post-approx {:.4} does not degrade from {:.4}",
                row.post_approx, row.original
            ),
        )?;
        check(
            row.post_tuning > row.post_approx,
            format!(
                "{pct}%: post-tuning {:.4} does not recover from {:.4}",
                row.post_tuning, row.post_approx
            ),
        )?;
        check(
            (row.post_tuning - reference).abs() <= RECOVERY_TOLERANCE,
            format!(
                "{pct}%: post-tuning {:.4} not within {RECOVERY_TOLERANCE} of {reference}",
                row.post_tuning
            ),
        )?;
        detail.push(format!(
            "{pct}%: {:.4} -> {:.4} -> {:.4} (reference {reference}, ranks {:?})",
            row.original, row.post_approx, row.post_tuning, row.ranks
        ));
    }
    Ok(detail.join("; "))
}

fn criterion_3(run: &Result<MnistRun, String>) -> Result<String, String> {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let mut detail = Vec::new();
    for ((row, _), (target, _)) in run.rows.iter().zip(RECOVERY_TARGETS) {
        let delta = row.post_impl - row.post_tuning;
        check(
            delta.abs() <= FIXED_POINT_TOLERANCE,
            format!(
                "{}%: post-implementation {:.4} vs post-tuning {:.4}",
                target * 100.0,
                row.post_impl,
                row.post_tuning
            ),
        )?;
        detail.push(format!(
            "{}%: {:.4} -> {:.4}",
            target * 100.0,
            row.post_tuning,
            row.post_impl
        ));
    }
    Ok(format!("Q16.7 {}", detail.join("; ")))
}

fn wide_multiply(fmt: FxFormat, a: i64, b: i64) -> i64 {
    let p = (a as i128 * b as i128) >> fmt.m;
    let modulus = 1i128 << fmt.n;
    let r = p.rem_euclid(modulus);
    (if r >= modulus / 2 { r - modulus } else { r }) as i64
}

fn criterion_4(run: &Result<MnistRun, String>) -> Result<String, String> {
    let started = Instant::now();
    let fmt = FxFormat::default();
    let run = run.as_ref().map_err(|e| e.clone())?;
    let (_, implemented) = &run.rows[0];
    let g = build_tdnn(implemented).map_err(|e| e.to_string())?;
    for image in &run.splits.test.images[..EQUIVALENCE_MNIST_IMAGES] {
        cycle_matches_fx(&g, image, fmt)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..EQUIVALENCE_RANDOM_GRAPHS {
        let net = random_net(&mut rng);
        let g = build_tdnn(&net).map_err(|e| e.to_string())?;
        let image = random_image(&mut rng, net.input_dims);
        for (n, m) in EQUIVALENCE_FORMATS {
            cycle_matches_fx(&g, &image, FxFormat::new(n, m).unwrap())?;
        }
    }
    let f8 = FxFormat::new(8, 4).unwrap();
    for a in f8.min_word()..=f8.max_word() {
        for b in f8.min_word()..=f8.max_word() {
            let want = wide_multiply(f8, a, b);
            check(
                serial_multiply(f8, a, b) == want && fx_multiply(f8, a, b) == want,
                format!("n=8 multiplier wrong for {a} x {b}"),
            )?;
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    check(
        seconds <= EQUIVALENCE_MAX_SECONDS,
        format!("took {seconds:.1} s"),
    )?;
    Ok(format!(
        "{EQUIVALENCE_MNIST_IMAGES} MNIST images, {EQUIVALENCE_RANDOM_GRAPHS} graphs x {} formats, 65536 n=8 pairs, {seconds:.1} s",
        EQUIVALENCE_FORMATS.len()
    ))
}

fn criterion_5() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let chi = random_tensor(&mut rng, [1, 28, 28, 10], 0.1);
    let net = NetworkSpec::new(
        MapDims::new(1, 28, 28),
        vec![
            LayerSpec::weighted(LayerKind::FullyConnected, chi.clone(), Some(vec![0.0; 10])),
            LayerSpec::softmax(),
        ],
    );
    let fl = factorize_layer(&chi, Ranks::new(1, 9, 8)).map_err(|e| e.to_string())?;
    let net = net.expand_factored(0, &fl).map_err(|e| e.to_string())?;
    let g = build_tdnn(&net).map_err(|e| e.to_string())?;
    let report = report_stats(&g, FxFormat::default());
    let us = report.image_time_us(CLOCK_MHZ);
    check(
        report.cycles_per_image == CYCLES_PER_IMAGE,
        format!("cycles per image {}", report.cycles_per_image),
    )?;
    check(
        (us - IMAGE_MICROSECONDS).abs() < 1e-9,
        format!("{us} us at {CLOCK_MHZ} MHz"),
    )?;
    Ok(format!(
        "{} cycles, {us} us at {CLOCK_MHZ} MHz",
        report.cycles_per_image
    ))
}

fn criterion_6() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let configs = 200;
    for _ in 0..configs {
        let c = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let (kh, kw) = (rng.random_range(1..=h), rng.random_range(1..=w));
        let f = rng.random_range(1..=4);
        let mut net = NetworkSpec::new(MapDims::new(c, h, w), Vec::new());
        let Ranks { rc, rv, .. } =
            push_factored(&mut rng, &mut net, LayerKind::Conv, [c, kh, kw, f]);
        let g = build_tdnn(&net).map_err(|e| e.to_string())?;
        let want = w * (kh - 1) * rc + (kw - 1) * rv;
        check(
            g.delay_count() == want,
            format!(
                "{c}x{h}x{w} kernel {kh}x{kw} ranks ({rc},{rv}): {} delays, formula {want}",
                g.delay_count()
            ),
        )?;
        let first = w * (kh - 1) + kw - 1;
        check(
            g.first_valid_step() == first,
            format!("first valid step {} != {first}", g.first_valid_step()),
        )?;
        let stage_delays: usize = g.stages.iter().map(|s| s.delay_count()).sum();
        check(stage_delays == want, "per-stage delays do not add up")?;
        let offsets: usize = g.stages.iter().map(|s| s.first_valid_offset(w)).sum();
        check(
            offsets == first,
            "per-stage first-valid offsets do not add up",
        )?;
    }
    Ok(format!("{configs} random layer configurations"))
}

fn criterion_7() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let nets = 100;
    let mut worst = 0.0f64;
    for _ in 0..nets {
        let net = random_net(&mut rng);
        let image = random_image(&mut rng, net.input_dims);
        worst = worst.max(stream_matches_frame(&net, &image)?);
    }
    check(
        worst <= STREAM_TOLERANCE,
        format!("worst relative difference {worst:e}"),
    )?;
    Ok(format!(
        "{nets} random multi-stage nets, worst difference {worst:.1e}"
    ))
}

fn criterion_8() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let nets = 10;
    let mut worst = 0.0f64;
    for _ in 0..nets {
        let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
        let classes = rng.random_range(2..=4);
        let mut net = NetworkSpec::new(MapDims::new(1, h, w), Vec::new());
        push_factored(
            &mut rng,
            &mut net,
            LayerKind::FullyConnected,
            [1, h, w, classes],
        );
        net.layers.push(LayerSpec::softmax());
        let images: Vec<_> = (0..6)
            .map(|_| random_image(&mut rng, net.input_dims))
            .collect();
        let labels = (0..6).map(|_| rng.random_range(0..classes)).collect();
        let data = Dataset::new(images, labels).unwrap();
        let (_, grads) = loss_and_gradients(&net, &data).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for (li, g) in grads.layers.iter().enumerate() {
            let Some(g) = g else { continue };
            let w_len = g.weights.len();
            let b_len = g.bias.as_ref().map_or(0, |b| b.len());
            for k in 0..w_len + b_len {
                let loss = |delta: f64| {
                    let mut p = net.clone();
                    if k < w_len {
                        p.layers[li].weights.as_mut().unwrap().data_mut()[k] += delta;
                    } else {
                        p.layers[li].bias.as_mut().unwrap()[k - w_len] += delta;
                    }
                    loss_and_gradients(&p, &data).unwrap().0
                };
                num.push((loss(h) - loss(-h)) / (2.0 * h));
                ana.push(if k < w_len {
                    g.weights.data()[k]
                } else {
                    g.bias.as_ref().unwrap()[k - w_len]
                });
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = num.iter().zip(&ana).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&num).max(norm(&ana)).max(1e-12));
    }
    check(
        worst <= GRADIENT_TOLERANCE,
        format!("worst relative error {worst:e}"),
    )?;
    Ok(format!(
        "{nets} random factored nets, worst relative error {worst:.1e}"
    ))
}

fn criterion_9(run: &Result<MnistRun, String>) -> Result<String, String> {
    let net = convnet_fixture();
    let (factored, report) =
        tdnc::pipeline::factorize_network(&net, tdnc::pipeline::RankChoice::TargetError(0.3))
            .map_err(|e| e.to_string())?;
    check(report.len() == 3, "expected three factored layers")?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images: Vec<FeatureMap> = match run {
        Ok(r) => r.splits.test.images[..3].to_vec(),
        Err(_) => (0..3)
            .map(|_| random_image(&mut rng, net.input_dims))
            .collect(),
    };
    let fmt = FxFormat::default();
    let (implemented, g) = implement(&factored, &images, fmt).map_err(|e| e.to_string())?;
    for image in &images {
        cycle_matches_fx(&g, image, fmt)?;
        let worst = stream_matches_frame(&implemented, image)?;
        check(
            worst <= STREAM_TOLERANCE,
            format!("stream differs from frame by {worst:e}"),
        )?;
    }
    let netlist = emit_netlist(&quantize_graph(&g, fmt), fmt).map_err(|e| e.to_string())?;
    let synapses = netlist
        .lines()
        .filter(|l| l.trim_start().starts_with("tdnn_synapse "))
        .count();
    check(
        synapses == g.synapse_count(),
        "netlist synapse count differs from the graph",
    )?;
    let stats = report_stats(&g, fmt);
    check(
        stats.cycles_per_image == 28 * 28 * fmt.period(),
        format!("cycles per image {}", stats.cycles_per_image),
    )?;
    Ok(format!(
        "ConvNet fixture ranks {:?}: {} synapses, {} delays, {} stages; factorize/build/simulate/emit round-trips hold",
        report.iter().map(|r| r.ranks).collect::<Vec<_>>(),
        g.synapse_count(),
        g.delay_count(),
        g.pipeline_depth()
    ))
}

fn main() -> ExitCode {
    // Respect `cargo test -- <filter>` style invocations of other targets.
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let mut v = Verdicts { failed: 0 };
    let run = mnist_run();
    v.record(1, "baseline reproduction", criterion_1(&run));
    v.record(2, "approximation and recovery", criterion_2(&run));
    v.record(3, "fixed-point fidelity", criterion_3(&run));
    v.record(4, "microarchitecture equivalence", criterion_4(&run));
    v.record(5, "timing arithmetic", criterion_5());
    v.record(6, "delay and latency formulas", criterion_6());
    v.record(7, "streaming matches frame", criterion_7());
    v.record(8, "gradient correctness", criterion_8());
    v.record(9, "ConvNet structural path", criterion_9(&run));
    println!("acceptance: {} of 9 criteria passed", 9 - v.failed);
    if v.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

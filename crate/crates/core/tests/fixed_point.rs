// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{fx_frame_forward, random_factored_net, random_image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdnc_core::fxsim::rescale_for_format;
use tdnc_core::fxsim::{
    cycle_simulate, cycle_simulate_traced, fx_forward, fx_multiply, fx_predict, quantize_graph,
    serial_multiply, FxFormat, FxProgram, TraceSink,
};
use tdnc_core::netir::{FeatureMap, LayerKind, LayerSpec, MapDims, NetworkSpec};
use tdnc_core::tdnn::{build_tdnn, NodeId};
use tdnc_core::tensor::Tensor4;

const FORMATS: [(u32, u32); 3] = [(8, 4), (16, 7), (24, 12)];

/// Wide-integer reference for one product.
fn wide_multiply(fmt: FxFormat, a: i64, b: i64) -> i64 {
    let p = (a as i128 * b as i128) >> fmt.m;
    let modulus = 1i128 << fmt.n;
    let mut r = p.rem_euclid(modulus);
    if r >= modulus / 2 {
        r -= modulus;
    }
    r as i64
}

#[test]
fn quantize_is_identity_on_the_grid() {
    let fmt = FxFormat::new(16, 7).unwrap();
    for w in fmt.min_word()..=fmt.max_word() {
        let x = fmt.dequantize(w);
        assert_eq!(fmt.quantize(x), w);
        assert!(fmt.is_representable(x));
    }
}

#[test]
fn multiply_matches_wide_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (n, m) in [(16, 7), (24, 12), (32, 16), (32, 31), (12, 1)] {
        let fmt = FxFormat::new(n, m).unwrap();
        for _ in 0..100_000 {
            let a = rng.random_range(fmt.min_word()..=fmt.max_word());
            let b = rng.random_range(fmt.min_word()..=fmt.max_word());
            assert_eq!(
                fx_multiply(fmt, a, b),
                wide_multiply(fmt, a, b),
                "n={n} m={m} {a}*{b}"
            );
        }
    }
}

#[test]
fn serial_multiplier_exhaustive_n8() {
    for m in 1..8 {
        let fmt = FxFormat::new(8, m).unwrap();
        for a in -128..128 {
            for b in -128..128 {
                assert_eq!(
                    serial_multiply(fmt, a, b),
                    wide_multiply(fmt, a, b),
                    "m={m} {a}*{b}"
                );
            }
        }
    }
}

/// One input pixel through one synapse into an identity neuron.
fn single_synapse_net(fmt: FxFormat, w: i64) -> NetworkSpec {
    NetworkSpec::new(
        MapDims::new(1, 1, 1),
        vec![LayerSpec::weighted(
            LayerKind::ChannelFilter,
            Tensor4::from_vec([1, 1, 1, 1], vec![fmt.dequantize(w)]).unwrap(),
            None,
        )],
    )
}

#[test]
fn cycle_multiplier_exhaustive_n8() {
    let fmt = FxFormat::new(8, 3).unwrap();
    for w in -128..128 {
        let g = build_tdnn(&single_synapse_net(fmt, w)).unwrap();
        for x in -128..128 {
            let img = FeatureMap::from_vec(MapDims::new(1, 1, 1), vec![fmt.dequantize(x)]).unwrap();
            let out = cycle_simulate(&g, &img, fmt).unwrap();
            assert_eq!(
                out.outputs.steps[0].values[0],
                wide_multiply(fmt, w, x),
                "{w}*{x}"
            );
        }
    }
}

#[test]
fn fx_forward_matches_frame_oracle_and_cycle_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for graph in 0..50 {
        let net = random_factored_net(&mut rng, true);
        let g = build_tdnn(&net).unwrap();
        for (n, m) in FORMATS {
            let fmt = FxFormat::new(n, m).unwrap();
            let image = random_image(&mut rng, net.input_dims);
            let fx = fx_forward(&g, &image, fmt).unwrap();
            let (dims, frame) = fx_frame_forward(&net, &image, fmt);
            for step in fx.valid_steps() {
                let (y, x) = step.position.unwrap();
                for f in 0..dims.c {
                    assert_eq!(
                        step.values[f],
                        frame[(f * dims.h + y) * dims.w + x],
                        "graph {graph} n={n}"
                    );
                }
            }
            let cyc = cycle_simulate(&g, &image, fmt).unwrap();
            assert_eq!(cyc.outputs, fx, "graph {graph} n={n}");
        }
    }
}

#[test]
fn trace_timing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = random_factored_net(&mut rng, true);
    let g = build_tdnn(&net).unwrap();
    let fmt = FxFormat::default();
    let image = random_image(&mut rng, net.input_dims);
    let r = cycle_simulate(&g, &image, fmt).unwrap();
    let t = &r.trace;
    assert_eq!(t.period, 32);
    assert_eq!(t.input_cycles, (g.raster_len() * 32) as u64);
    assert_eq!(
        t.total_cycles,
        ((g.raster_len() + g.pipeline_depth()) * 32) as u64
    );
    assert_eq!(
        t.first_valid_output_cycle,
        Some(((g.first_valid_step() + g.pipeline_depth()) * 32) as u64)
    );
    assert!(t.input_sample_start.windows(2).all(|w| w[1] - w[0] == 32));
    // Delays shift only while a word is on the wire.
    let periods = t.total_cycles / t.period;
    for (phase, &count) in t.delay_shifts_by_phase.iter().enumerate() {
        let want = if phase < 16 {
            g.delay_count() as u64 * periods
        } else {
            0
        };
        assert_eq!(count, want, "phase {phase}");
    }
    assert_eq!(
        t.synapse_starts_by_phase[0],
        g.synapse_count() as u64 * periods
    );
    assert!(t.synapse_starts_by_phase[1..].iter().all(|&c| c == 0));
}

struct Recorder(Vec<(u64, NodeId, bool)>);

impl TraceSink for Recorder {
    fn bit(&mut self, cycle: u64, node: NodeId, bit: bool) {
        self.0.push((cycle, node, bit));
    }
}

#[test]
fn trace_sink_sees_input_bits_lsb_first() {
    let fmt = FxFormat::new(8, 3).unwrap();
    let g = build_tdnn(&single_synapse_net(fmt, 8)).unwrap();
    let img =
        FeatureMap::from_vec(MapDims::new(1, 1, 1), vec![fmt.dequantize(0b0101_0110)]).unwrap();
    let mut rec = Recorder(Vec::new());
    cycle_simulate_traced(&g, &img, fmt, Some(&mut rec)).unwrap();
    let input = g.inputs[0];
    let bits: Vec<bool> = rec
        .0
        .iter()
        .filter(|e| e.1 == input)
        .map(|e| e.2)
        .take(8)
        .collect();
    assert_eq!(bits, [false, true, true, false, true, false, true, false]);
    assert_eq!(rec.0.len() as u64, 2 * 16 * g.nodes.len() as u64);
}

#[test]
fn quantized_graph_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = random_factored_net(&mut rng, false);
    let g = build_tdnn(&net).unwrap();
    let fmt = FxFormat::default();
    let q = quantize_graph(&g, fmt);
    assert_eq!(quantize_graph(&q, fmt), q);
    let image = random_image(&mut rng, net.input_dims);
    assert_eq!(
        fx_forward(&q, &image, fmt).unwrap(),
        fx_forward(&g, &image, fmt).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantize_idempotent_and_nearest(x in -300.0f64..300.0, n in 2u32..=32, m_frac in 0.0f64..1.0) {
        let m = 1 + ((n - 2) as f64 * m_frac) as u32;
        let fmt = FxFormat::new(n, m).unwrap();
        let q = fmt.snap(x);
        prop_assert_eq!(fmt.snap(q), q);
        let lo = fmt.dequantize(fmt.min_word());
        let hi = fmt.dequantize(fmt.max_word());
        if x > lo && x < hi {
            prop_assert!((q - x).abs() <= fmt.resolution() / 2.0);
        } else {
            prop_assert!(q == lo || q == hi);
        }
    }

    #[test]
    fn cycle_equals_fx_random_graphs(seed in any::<u64>(), which in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_factored_net(&mut rng, true);
        let g = build_tdnn(&net).unwrap();
        let (n, m) = FORMATS[which];
        let fmt = FxFormat::new(n, m).unwrap();
        let image = random_image(&mut rng, net.input_dims);
        prop_assert_eq!(cycle_simulate(&g, &image, fmt).unwrap().outputs, fx_forward(&g, &image, fmt).unwrap());
    }
}

#[test]
fn unit_and_zero_weights_are_not_synapses() {
    let fmt = FxFormat::new(12, 5).unwrap();
    let v = Tensor4::from_vec([1, 2, 1, 2], vec![1.0, 0.0, -1.0, 0.5]).unwrap();
    let h = Tensor4::from_vec(
        [2, 1, 2, 2],
        vec![0.0, 1.0, 0.25, 1.0, 1.0, -1.0, 0.0, 0.75],
    )
    .unwrap();
    let net = NetworkSpec::new(
        MapDims::new(1, 3, 3),
        vec![
            LayerSpec::weighted(LayerKind::VerticalFilter, v, Some(vec![0.125, -0.5])),
            LayerSpec::relu(),
            LayerSpec::weighted(LayerKind::HorizontalFilter, h, None),
        ],
    );
    let g = build_tdnn(&net).unwrap();
    assert_eq!(g.synapse_count(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let image = random_image(&mut rng, net.input_dims);
        let fx = fx_forward(&g, &image, fmt).unwrap();
        let (dims, frame) = fx_frame_forward(&net, &image, fmt);
        for step in fx.valid_steps() {
            let (y, x) = step.position.unwrap();
            for f in 0..dims.c {
                assert_eq!(step.values[f], frame[(f * dims.h + y) * dims.w + x]);
            }
        }
        assert_eq!(cycle_simulate(&g, &image, fmt).unwrap().outputs, fx);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn valid_only_evaluation_keeps_valid_outputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_factored_net(&mut rng, true);
        let g = build_tdnn(&net).unwrap();
        let fmt = FxFormat::default();
        let image = random_image(&mut rng, net.input_dims);
        let full = fx_forward(&g, &image, fmt).unwrap();
        let fast = FxProgram::new(&g, fmt).run(&image, true).unwrap();
        let a: Vec<_> = full.valid_steps().collect();
        let b: Vec<_> = fast.valid_steps().collect();
        prop_assert_eq!(a, b);
        prop_assert!(fx_predict(&g, &image, fmt).unwrap() < g.outputs.len());
    }

    #[test]
    fn rescaling_preserves_the_function(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_factored_net(&mut rng, true);
        let fmt = FxFormat::default();
        let images: Vec<FeatureMap> = (0..4).map(|_| random_image(&mut rng, net.input_dims)).collect();
        let scaled = rescale_for_format(&net, &images[..3], fmt, 2).unwrap();
        let limit = (1u64 << (fmt.n - fmt.m - 3)) as f64;
        let last = net.layers.iter().rposition(|l| l.weights.is_some()).unwrap();
        for image in &images {
            let a = net.forward(image).unwrap();
            let b = scaled.forward(image).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{} vs {}", x, y);
            }
        }
        // Each scale is a power of two and calibration peaks stay under the limit.
        for image in &images[..3] {
            let acts = scaled.forward_all(image).unwrap();
            for (i, layer) in scaled.layers.iter().enumerate() {
                if layer.weights.is_some() && i != last {
                    let peak = acts[i + 1].data().iter().fold(0.0f64, |p, v| p.max(v.abs()));
                    prop_assert!(peak <= limit, "layer {} peak {}", i, peak);
                }
            }
        }
        for (a, b) in net.layers.iter().zip(&scaled.layers) {
            if let (Some(wa), Some(wb)) = (&a.weights, &b.weights) {
                for (x, y) in wa.data().iter().zip(wb.data()) {
                    if *x != 0.0 {
                        let r = (y / x).log2();
                        prop_assert_eq!(r, r.round());
                    }
                }
            }
        }
    }
}

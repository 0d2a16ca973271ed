// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::HashMap;

use common::{random_factored_net, random_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdnc_core::emit::{emit_dot, emit_netlist, report_stats};
use tdnc_core::factorizer::{factorize_layer, Ranks};
use tdnc_core::fxsim::{quantize_graph, FxFormat};
use tdnc_core::netir::{LayerKind, LayerSpec, MapDims, NetworkSpec};
use tdnc_core::tdnn::{build_tdnn, Node, TdnnGraph};
use tdnc_core::Error;

fn graph(seed: u64) -> TdnnGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_tdnn(&random_factored_net(&mut rng, true)).unwrap()
}

/// `name(value)` parameters of one instantiation line.
fn params(line: &str) -> HashMap<String, String> {
    let start = line.find("#(").unwrap() + 2;
    let end = line[start..].find(") u_").unwrap() + start;
    line[start..end]
        .split(", ")
        .map(|p| {
            let p = p.trim_start_matches('.');
            let (k, v) = p.split_once('(').unwrap();
            (k.to_string(), v.trim_end_matches(')').to_string())
        })
        .collect()
}

fn parse_word(lit: &str, fmt: FxFormat) -> i64 {
    let (width, hex) = lit.split_once("'sh").unwrap();
    assert_eq!(width.parse::<u32>().unwrap(), fmt.n);
    fmt.wrap(i64::from_str_radix(hex, 16).unwrap())
}

#[test]
fn netlist_parses_back() {
    for seed in 0..10 {
        let fmt = FxFormat::default();
        let g = quantize_graph(&graph(seed), fmt);
        let v = emit_netlist(&g, fmt).unwrap();
        let top = &v[v.find("module tdnn_top").unwrap()..];
        let lines: Vec<&str> = top.lines().collect();
        let syn: Vec<&str> = lines
            .iter()
            .copied()
            .filter(|l| l.trim_start().starts_with("tdnn_synapse "))
            .collect();
        assert_eq!(syn.len(), g.synapse_count());
        let weights: Vec<i64> = g
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Synapse { weight, .. } => Some(fmt.quantize(*weight)),
                _ => None,
            })
            .collect();
        for (line, w) in syn.iter().zip(&weights) {
            assert_eq!(parse_word(&params(line)["WEIGHT"], fmt), *w);
        }
        let delays: usize = lines
            .iter()
            .filter(|l| l.trim_start().starts_with("tdnn_delay_chain "))
            .map(|l| params(l)["LENGTH"].parse::<usize>().unwrap())
            .sum();
        assert_eq!(delays, g.delay_count());
        let neurons = lines
            .iter()
            .filter(|l| l.trim_start().starts_with("tdnn_neuron "))
            .count();
        assert_eq!(neurons, g.neuron_count());
        let outputs = lines
            .iter()
            .filter(|l| l.trim_start().starts_with("tdnn_output_port "))
            .count();
        assert_eq!(outputs, g.outputs.len());
        // Every wire is declared before it is used.
        let mut declared = std::collections::HashSet::new();
        for l in &lines {
            let t = l.trim_start();
            if let Some(rest) = t.strip_prefix("wire ") {
                let name = rest.trim_end_matches(';').rsplit(' ').next().unwrap();
                declared.insert(name.to_string());
            }
            if t.starts_with("tdnn_") {
                for tok in t.split(|c: char| !(c.is_alphanumeric() || c == '_')) {
                    let is_node = tok.len() > 1
                        && (tok.starts_with('n') || tok.starts_with('d'))
                        && tok[1..].chars().all(|c| c.is_ascii_digit() || c == '_')
                        && tok[1..].starts_with(|c: char| c.is_ascii_digit());
                    let own = t.contains(&format!("u_{tok} "))
                        || t.contains(&format!(".y({tok})"))
                        || t.contains(&format!(".p({tok})"))
                        || t.contains(&format!(".q({tok})"));
                    if is_node && !own {
                        assert!(
                            declared.contains(tok),
                            "{tok} used before declaration in: {t}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn unquantized_weights_are_refused() {
    let g = graph(3);
    let fmt = FxFormat::default();
    let err = emit_netlist(&g, fmt).unwrap_err();
    assert!(matches!(err, Error::Unquantized { n: 16, m: 7, .. }));
}

#[test]
fn dot_edges_and_colors() {
    let g = graph(4);
    let dot = emit_dot(&g);
    let edges = dot.lines().filter(|l| l.contains("->")).count();
    let expected: usize = g
        .nodes
        .iter()
        .map(|n| match n {
            Node::Neuron { inputs, .. } => inputs.len(),
            Node::Delay { .. } | Node::Output { .. } => 1,
            Node::Max { sources } => sources.len(),
            _ => 0,
        })
        .sum();
    assert_eq!(edges, expected);
    for (id, n) in g.nodes.iter().enumerate() {
        if let Node::Synapse { weight, source } = n {
            let owner = g
                .nodes
                .iter()
                .position(|m| matches!(m, Node::Neuron { inputs, .. } if inputs.contains(&id)))
                .unwrap();
            let line = dot
                .lines()
                .find(|l| {
                    l.starts_with(&format!("  n{source} -> n{owner} "))
                        && l.contains(&format!("label=\"{weight:.4}\""))
                })
                .unwrap();
            let color = &line[line.find("color=\"#").unwrap() + 8..][..6];
            if *weight == 1.0 {
                assert_eq!(color, "000000");
            } else if *weight == 0.0 {
                assert_eq!(color, "bfbfbf");
            } else if *weight > 0.0 {
                assert!(color.starts_with("ff"), "{line}");
            } else {
                assert!(color.ends_with("ff"), "{line}");
            }
        }
    }
    assert!(dot.lines().filter(|l| l.contains("shape=box")).count() == g.delay_count());
}

#[test]
fn report_kv_parses_back() {
    let fmt = FxFormat::default();
    let g = graph(6);
    let r = report_stats(&g, fmt);
    let text = r.to_kv();
    let kv: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    assert_eq!(kv["synapses"].parse::<usize>().unwrap(), g.synapse_count());
    assert_eq!(
        kv["delay_elements"].parse::<usize>().unwrap(),
        g.delay_count()
    );
    assert_eq!(
        kv["delay_bits"].parse::<usize>().unwrap(),
        g.delay_count() * 16
    );
    assert_eq!(
        kv["pipeline_stages"].parse::<usize>().unwrap(),
        g.pipeline_depth()
    );
    assert_eq!(
        kv["first_valid_step"].parse::<usize>().unwrap(),
        g.first_valid_step()
    );
    let stage_lines = r
        .to_kv()
        .lines()
        .filter(|l| l.starts_with("stage."))
        .count();
    assert_eq!(stage_lines, g.stages.len());
    let per_stage: usize = r
        .stages
        .iter()
        .map(|s| s.vertical_delays + s.horizontal_delays)
        .sum();
    assert_eq!(per_stage, g.delay_count());
    assert!(r.to_table().contains("cycles per image"));
}

#[test]
fn mnist_frame_timing() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let chi = random_tensor(&mut rng, [1, 28, 28, 10], 0.1);
    let fl = factorize_layer(&chi, Ranks::new(1, 2, 4)).unwrap();
    let net = NetworkSpec::new(
        MapDims::new(1, 28, 28),
        vec![LayerSpec::weighted(LayerKind::FullyConnected, chi, None)],
    )
    .expand_factored(0, &fl)
    .unwrap();
    let r = report_stats(&build_tdnn(&net).unwrap(), FxFormat::default());
    assert_eq!(r.cycles_per_image, 25088);
    assert!((r.image_time_us(160.0) - 156.8).abs() < 1e-9);
    assert_eq!(r.delay_elements, 810);
}

// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use rand::Rng;
use tdnc_core::factorizer::{factorize_layer, feasible_ranks};
use tdnc_core::fxsim::FxFormat;
use tdnc_core::netir::{FeatureMap, LayerKind, LayerSpec, MapDims, NetworkSpec};
use tdnc_core::tensor::Tensor4;

pub fn random_tensor(rng: &mut impl Rng, dims: [usize; 4], scale: f64) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-scale..scale)).unwrap()
}

pub fn random_image(rng: &mut impl Rng, dims: MapDims) -> FeatureMap {
    FeatureMap::from_vec(
        dims,
        (0..dims.len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Appends a `kind` layer of shape `dims` and replaces it by a factorization
/// at random feasible ranks with a random bias.
pub fn push_factored(rng: &mut impl Rng, net: &mut NetworkSpec, kind: LayerKind, dims: [usize; 4]) {
    let chi = random_tensor(rng, dims, 1.0);
    let ranks: Vec<_> = feasible_ranks(dims).collect();
    let r = ranks[rng.random_range(0..ranks.len())];
    let mut fl = factorize_layer(&chi, r).unwrap();
    fl.bias = Some((0..dims[3]).map(|_| rng.random_range(-0.5..0.5)).collect());
    // Exact zeros and unit weights take the pruned and pass-through paths.
    for t in [
        &mut fl.chi_c,
        &mut fl.chi_v,
        &mut fl.chi_h,
        &mut fl.chi_g,
        &mut fl.chi_i,
    ] {
        for v in t.data_mut() {
            if rng.random_bool(0.1) {
                *v = [0.0, 1.0, -1.0][rng.random_range(0..3)];
            }
        }
    }
    net.layers.push(LayerSpec::weighted(kind, chi, None));
    let idx = net.layers.len() - 1;
    *net = net.expand_factored(idx, &fl).unwrap();
}

/// Small random network of factored layers, optional ReLUs and (if allowed)
/// max pooling, ending in a fully connected layer.
pub fn random_factored_net(rng: &mut impl Rng, allow_pool: bool) -> NetworkSpec {
    let c = rng.random_range(1..=2);
    let h = rng.random_range(3..=7);
    let w = rng.random_range(3..=7);
    let mut net = NetworkSpec::new(MapDims::new(c, h, w), Vec::new());
    let kh = rng.random_range(1..=h.min(3));
    let kw = rng.random_range(1..=w.min(3));
    let f1 = rng.random_range(1..=3);
    push_factored(rng, &mut net, LayerKind::Conv, [c, kh, kw, f1]);
    if rng.random_bool(0.5) {
        net.layers.push(LayerSpec::relu());
    }
    let d = net.output_dims().unwrap();
    if allow_pool && d.h >= 2 && d.w >= 2 && rng.random_bool(0.6) {
        net.layers
            .push(LayerSpec::maxpool(2, rng.random_range(1..=2)));
        if rng.random_bool(0.3) {
            net.layers.push(LayerSpec::relu());
        }
    }
    let d = net.output_dims().unwrap();
    let f2 = rng.random_range(1..=4);
    push_factored(
        rng,
        &mut net,
        LayerKind::FullyConnected,
        [d.c, d.h, d.w, f2],
    );
    net
}

/// Frame-at-a-time fixed-point reference: every layer evaluated on whole
/// maps with wide integers.
pub fn fx_frame_forward(
    net: &NetworkSpec,
    image: &FeatureMap,
    fmt: FxFormat,
) -> (MapDims, Vec<i64>) {
    let wrap = |v: i128| -> i64 {
        let modulus = 1i128 << fmt.n;
        let mut r = v.rem_euclid(modulus);
        if r >= modulus / 2 {
            r -= modulus;
        }
        r as i64
    };
    let mut dims = image.dims();
    let mut cur: Vec<i64> = image.data().iter().map(|&x| fmt.quantize(x)).collect();
    let at = |d: MapDims, c: usize, y: usize, x: usize| (c * d.h + y) * d.w + x;
    for layer in &net.layers {
        match layer.kind {
            LayerKind::Relu => cur.iter_mut().for_each(|v| *v = (*v).max(0)),
            LayerKind::Softmax => {}
            LayerKind::MaxPool => {
                let p = layer.pool.unwrap();
                let od = MapDims::new(
                    dims.c,
                    (dims.h - p.window) / p.stride + 1,
                    (dims.w - p.window) / p.stride + 1,
                );
                let mut out = vec![0; od.len()];
                for c in 0..od.c {
                    for y in 0..od.h {
                        for x in 0..od.w {
                            let mut best = i64::MIN;
                            for i in 0..p.window {
                                for j in 0..p.window {
                                    best = best
                                        .max(cur[at(dims, c, y * p.stride + i, x * p.stride + j)]);
                                }
                            }
                            out[at(od, c, y, x)] = best;
                        }
                    }
                }
                cur = out;
                dims = od;
            }
            _ => {
                let w = layer.weights.as_ref().unwrap();
                let [cn, kh, kw, fnum] = w.dims();
                let od = MapDims::new(fnum, dims.h - kh + 1, dims.w - kw + 1);
                let mut out = vec![0; od.len()];
                for f in 0..fnum {
                    let b = layer.bias.as_ref().map_or(0, |b| fmt.quantize(b[f])) as i128;
                    for y in 0..od.h {
                        for x in 0..od.w {
                            let mut acc = b;
                            for c in 0..cn {
                                for i in 0..kh {
                                    for j in 0..kw {
                                        let q = fmt.quantize(w.get(c, i, j, f)) as i128;
                                        let v = cur[at(dims, c, y + i, x + j)] as i128;
                                        acc += wrap((q * v) >> fmt.m) as i128;
                                    }
                                }
                            }
                            out[at(od, f, y, x)] = wrap(acc);
                        }
                    }
                }
                cur = out;
                dims = od;
            }
        }
    }
    (dims, cur)
}

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use tbnet::finalize::{rollback_mr, Finalized};
use tbnet::graph::{BranchGraph, LayerKind, LayerParams};
use tbnet::graph::tiny_cnn;
use tbnet::prune::{apply_mask, ChannelMask, PruneCheckpoint};
use tbnet::{init_twobranch, InitOptions, TwoBranchModel};
use tbnet_tensor::check::naive_conv2d;
use tbnet_tensor::{Tensor, BN_EPSILON};

pub fn victim(seed: u64) -> tbnet::BranchGraph {
    tiny_cnn([1, 8, 8], 3, [4, 4, 3, 2], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Gives every BN layer non-trivial affine parameters and running stats.
pub fn perturb(g: &mut BranchGraph, rng: &mut ChaCha8Rng) {
    for layer in &mut g.layers {
        if let LayerParams::Conv(p) = &mut layer.params {
            for v in p.gamma.data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
            for v in p.beta.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
            for v in p.stats.mean.iter_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
            for v in p.stats.var.iter_mut() {
                *v = rng.random_range(0.5..2.0);
            }
        }
    }
}

/// A finalized model whose M_R is wider than M_T at two merge points.
pub fn finalized(seed: u64) -> TwoBranchModel {
    finalized_full(seed).model
}

pub fn finalized_full(seed: u64) -> Finalized {
    let mut m0 = init_twobranch(&victim(seed), seed + 1, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb(&mut m0.ree, &mut rng);
    perturb(&mut m0.tee, &mut rng);
    let mut mask = ChannelMask::all_ones(&m0).unwrap();
    mask.layers[0].keep = vec![true, false, true, true];
    mask.layers[2].keep = vec![false, true, true];
    let mut m1 = m0.clone();
    apply_mask(&mut m1, &mask).unwrap();
    let history = vec![
        PruneCheckpoint {
            iteration: 0,
            model: m0,
            accuracy: 0.5,
            mask: None,
        },
        PruneCheckpoint {
            iteration: 1,
            model: m1,
            accuracy: 0.5,
            mask: Some(mask),
        },
    ];
    rollback_mr(&history).unwrap()
}

/// Activation in f64 with its NCHW shape (flat tensors use h = w = 1).
#[derive(Clone)]
struct Act(Vec<f64>, [usize; 4]);

fn layer_ref(g: &BranchGraph, idx: usize, x: &Act) -> Act {
    let layer = &g.layers[idx];
    let [n, c, h, w] = x.1;
    match (&layer.spec.kind, &layer.params) {
        (LayerKind::ConvBlock { stride, padding, .. }, LayerParams::Conv(p)) => {
            let f = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
            let ws = p.weight.shape();
            let (mut y, ys) = naive_conv2d(&x.0, x.1, &f(&p.weight), [ws[0], ws[1], ws[2], ws[3]], &f(&p.bias), *stride, *padding);
            let plane = ys[2] * ys[3];
            for (i, v) in y.iter_mut().enumerate() {
                let ch = (i / plane) % ys[1];
                let norm = (*v - p.stats.mean[ch] as f64) / (p.stats.var[ch] as f64 + BN_EPSILON).sqrt();
                *v = (norm * p.gamma.data()[ch] as f64 + p.beta.data()[ch] as f64).max(0.0);
            }
            Act(y, ys)
        }
        (LayerKind::MaxPool, _) => {
            let (oh, ow) = (h / 2, w / 2);
            let mut y = vec![f64::NEG_INFINITY; n * c * oh * ow];
            for s in 0..n * c {
                for i in 0..oh * 2 {
                    for j in 0..ow * 2 {
                        let o = &mut y[(s * oh + i / 2) * ow + j / 2];
                        *o = o.max(x.0[(s * h + i) * w + j]);
                    }
                }
            }
            Act(y, [n, c, oh, ow])
        }
        (LayerKind::GlobalAvgPool, _) => {
            let y = (0..n * c).map(|s| x.0[s * h * w..(s + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
            Act(y, [n, c, 1, 1])
        }
        (LayerKind::Dense { in_features, out_features }, LayerParams::Dense(p)) => {
            let mut y = vec![0.0; n * out_features];
            for s in 0..n {
                for o in 0..*out_features {
                    let mut acc = p.bias.data()[o] as f64;
                    for i in 0..*in_features {
                        acc += p.weight.data()[o * in_features + i] as f64 * x.0[s * in_features + i];
                    }
                    y[s * out_features + o] = acc;
                }
            }
            Act(y, [n, *out_features, 1, 1])
        }
        other => panic!("reference does not cover {:?}", other.0),
    }
}

/// Both chains layer by layer, adding gathered M_R channels into M_T after
/// every merge point.
pub fn two_chain_reference(m: &TwoBranchModel, x: &Tensor<f32>) -> Vec<f64> {
    let s = x.shape();
    let x = Act(x.data().iter().map(|&v| v as f64).collect(), [s[0], s[1], s[2], s[3]]);
    let mut r = vec![];
    let mut cur = x.clone();
    for i in 0..m.ree.layers.len() {
        cur = layer_ref(&m.ree, i, &cur);
        r.push(cur.clone());
    }
    let mut t = x;
    for i in 0..m.tee.layers.len() {
        t = layer_ref(&m.tee, i, &t);
        if let Some(k) = m.merge_points.iter().position(|p| p.tee_layer == i) {
            let src = &r[m.merge_points[k].ree_layer];
            let [n, c, h, w] = t.1;
            let plane = h * w;
            let cr = src.1[1];
            for sample in 0..n {
                for ch in 0..c {
                    let from = m.alignment.as_ref().map_or(ch, |a| a[k].0[ch]);
                    for e in 0..plane {
                        t.0[(sample * c + ch) * plane + e] += src.0[(sample * cr + from) * plane + e];
                    }
                }
            }
        }
    }
    t.0
}

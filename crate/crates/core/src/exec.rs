//! Forward and backward execution of one branch as a layer chain.

use tbnet_tensor::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, dense, dense_backward, elementwise_add,
    global_avgpool, global_avgpool_backward, maxpool2x2, maxpool2x2_backward, relu, relu_backward,
    BatchNormCache, BnMode, Conv2dSpec, Real, Tensor, BN_EPSILON,
};

use crate::error::{Error, Result};
use crate::graph::{BranchGraph, LayerKind, LayerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }
}

#[derive(Debug, Clone)]
enum Cache<F: Real> {
    Conv {
        input: Tensor<F>,
        bn: BatchNormCache<F>,
        pre_relu: Tensor<F>,
        batch_stats: Option<(Vec<F>, Vec<F>)>,
    },
    Pool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Gap {
        input_shape: Vec<usize>,
    },
    Dense {
        input: Tensor<F>,
    },
    Residual,
}

/// Per-layer outputs (after any merge hook), plus backward caches when the
/// run was recorded.
#[derive(Debug, Clone)]
pub struct Tape<F: Real> {
    pub outputs: Vec<Tensor<F>>,
    caches: Vec<Cache<F>>,
    recorded: bool,
}

impl<F: Real> Tape<F> {
    pub fn logits(&self) -> &Tensor<F> {
        self.outputs.last().expect("non-empty graph")
    }
}

fn check_input<F: Real>(graph: &BranchGraph<F>, x: &Tensor<F>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != graph.input_shape {
        return Err(tbnet_tensor::TensorError::Shape {
            op: "forward",
            detail: format!("input {:?} does not match graph input [N, {:?}]", s, graph.input_shape),
        }
        .into());
    }
    Ok(())
}

/// Runs the chain. `hook` may modify each layer's output in place before it
/// feeds later layers; two-branch merging is implemented through it.
pub fn run_chain<F: Real>(
    graph: &BranchGraph<F>,
    x: &Tensor<F>,
    mode: Mode,
    record: bool,
    mut hook: impl FnMut(usize, &mut Tensor<F>) -> Result<()>,
) -> Result<Tape<F>> {
    check_input(graph, x)?;
    let mut outputs: Vec<Tensor<F>> = Vec::with_capacity(graph.layers.len());
    let mut caches = Vec::new();
    for (idx, layer) in graph.layers.iter().enumerate() {
        let input = if idx == 0 { x } else { &outputs[idx - 1] };
        let (mut out, cache) = match (&layer.spec.kind, &layer.params) {
            (LayerKind::ConvBlock { stride, padding, .. }, LayerParams::Conv(p)) => {
                let spec = Conv2dSpec {
                    stride: *stride,
                    padding: *padding,
                };
                let z = conv2d(input, &p.weight, &p.bias, spec)?;
                let bn = batchnorm_forward(&z, &p.gamma, &p.beta, &p.stats, mode.bn(), F::from_f64(BN_EPSILON))?;
                let out = relu(&bn.output);
                let cache = record.then(|| Cache::Conv {
                    input: input.clone(),
                    bn: bn.cache,
                    pre_relu: bn.output,
                    batch_stats: bn.batch_stats,
                });
                (out, cache)
            }
            (LayerKind::MaxPool, _) => {
                let r = maxpool2x2(input)?;
                let cache = record.then(|| Cache::Pool {
                    input_shape: input.shape().to_vec(),
                    argmax: r.argmax,
                });
                (r.output, cache)
            }
            (LayerKind::GlobalAvgPool, _) => (
                global_avgpool(input)?,
                record.then(|| Cache::Gap {
                    input_shape: input.shape().to_vec(),
                }),
            ),
            (LayerKind::Dense { .. }, LayerParams::Dense(p)) => (
                dense(input, &p.weight, &p.bias)?,
                record.then(|| Cache::Dense { input: input.clone() }),
            ),
            (LayerKind::ResidualAdd { from }, _) => {
                (elementwise_add(input, &outputs[*from])?, record.then_some(Cache::Residual))
            }
            _ => return Err(Error::Graph(format!("layer {idx}: parameters do not match spec"))),
        };
        hook(idx, &mut out)?;
        outputs.push(out);
        if let Some(c) = cache {
            caches.push(c);
        }
    }
    Ok(Tape {
        outputs,
        caches,
        recorded: record,
    })
}

/// Plain forward pass returning the classifier output.
pub fn forward_chain<F: Real>(graph: &BranchGraph<F>, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
    let mut tape = run_chain(graph, x, mode, false, |_, _| Ok(()))?;
    Ok(tape.outputs.pop().expect("non-empty graph"))
}

fn add_into<F: Real>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::Graph(format!(
                    "gradient shapes {:?} and {:?} differ",
                    acc.shape(),
                    g.shape()
                )));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    Ok(())
}

/// Back-propagates through a recorded chain.
///
/// `seeds[i]` is an external gradient with respect to the output of layer
/// `i`. `observe` sees the total gradient of every layer output before it
/// is pushed through that layer. Parameter gradients accumulate into the
/// graph's tensors; frozen tensors are left untouched.
pub fn backward_chain<F: Real>(
    graph: &mut BranchGraph<F>,
    tape: &Tape<F>,
    mut seeds: Vec<Option<Tensor<F>>>,
    mut observe: impl FnMut(usize, &Tensor<F>) -> Result<()>,
) -> Result<()> {
    if !tape.recorded {
        return Err(Error::Graph("backward requires a recorded forward pass".into()));
    }
    let n = graph.layers.len();
    seeds.resize(n, None);
    for idx in (0..n).rev() {
        let Some(g) = seeds[idx].take() else {
            continue;
        };
        observe(idx, &g)?;
        let layer = &mut graph.layers[idx];
        let grad_in = match (&tape.caches[idx], &mut layer.params) {
            (
                Cache::Conv {
                    input, bn, pre_relu, ..
                },
                LayerParams::Conv(p),
            ) => {
                let LayerKind::ConvBlock { stride, padding, .. } = layer.spec.kind else {
                    unreachable!()
                };
                let g = relu_backward(pre_relu, &g)?;
                let (gz, dgamma, dbeta) = batchnorm_backward(bn, &p.gamma, &g)?;
                let spec = Conv2dSpec { stride, padding };
                let cg = conv2d_backward(input, &p.weight, &gz, spec, idx > 0)?;
                if p.weight.requires_grad {
                    p.weight.accumulate_grad(&cg.weight)?;
                    p.bias.accumulate_grad(&cg.bias)?;
                    p.gamma.accumulate_grad(&dgamma)?;
                    p.beta.accumulate_grad(&dbeta)?;
                }
                cg.input
            }
            (Cache::Pool { input_shape, argmax }, _) => Some(maxpool2x2_backward(input_shape, argmax, &g)?),
            (Cache::Gap { input_shape }, _) => Some(global_avgpool_backward(input_shape, &g)?),
            (Cache::Dense { input }, LayerParams::Dense(p)) => {
                let dg = dense_backward(input, &p.weight, &g)?;
                if p.weight.requires_grad {
                    p.weight.accumulate_grad(&dg.weight)?;
                    p.bias.accumulate_grad(&dg.bias)?;
                }
                Some(dg.input)
            }
            (Cache::Residual, _) => {
                let LayerKind::ResidualAdd { from } = layer.spec.kind else {
                    unreachable!()
                };
                add_into(&mut seeds[from], g.clone())?;
                Some(g)
            }
            _ => return Err(Error::Graph(format!("layer {idx}: cache does not match layer"))),
        };
        if idx > 0 {
            if let Some(gi) = grad_in {
                add_into(&mut seeds[idx - 1], gi)?;
            }
        }
    }
    Ok(())
}

/// Folds the batch statistics of a train-mode tape into the running stats.
pub fn commit_running_stats<F: Real>(graph: &mut BranchGraph<F>, tape: &Tape<F>) {
    for (layer, cache) in graph.layers.iter_mut().zip(&tape.caches) {
        if let (
            LayerParams::Conv(p),
            Cache::Conv {
                batch_stats: Some((m, v)),
                ..
            },
        ) = (&mut layer.params, cache)
        {
            p.stats.update(m, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tiny_cnn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tbnet_tensor::softmax_cross_entropy;

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g: BranchGraph<f64> = tiny_cnn([1, 8, 8], 3, [2, 3, 3, 4], &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(&[3, 1, 8, 8], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
        let labels = [0usize, 2, 1];
        let tape = run_chain(&g, &x, Mode::Train, true, |_, _| Ok(())).unwrap();
        let (_, dl) = softmax_cross_entropy(tape.logits(), &labels).unwrap();
        let mut seeds = vec![None; g.layers.len()];
        *seeds.last_mut().unwrap() = Some(dl);
        g.zero_grad();
        backward_chain(&mut g, &tape, seeds, |_, _| Ok(())).unwrap();
        let analytic = match &g.layers[2].params {
            LayerParams::Conv(p) => p.weight.grad().unwrap().to_vec(),
            _ => unreachable!(),
        };
        let h = 1e-6;
        for probe in [0usize, 5, 17, 40] {
            let loss_at = |delta: f64| {
                let mut gg = g.clone();
                if let LayerParams::Conv(p) = &mut gg.layers[2].params {
                    p.weight.data_mut()[probe] += delta;
                }
                let logits = forward_chain(&gg, &x, Mode::Train).unwrap();
                softmax_cross_entropy(&logits, &labels).unwrap().0
            };
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let err = (numeric - analytic[probe]).abs() / numeric.abs().max(1e-8);
            assert!(err < 1e-4, "probe {probe}: {numeric} vs {}", analytic[probe]);
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let g: BranchGraph = tiny_cnn([1, 8, 8], 3, [2, 3, 3, 4], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(forward_chain(&g, &Tensor::zeros(&[1, 1, 9, 8]), Mode::Eval).is_err());
    }
}

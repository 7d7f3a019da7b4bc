//! Exact parameter, byte and multiply-accumulate accounting.

use serde::{Deserialize, Serialize};
use tbnet_tensor::Real;

use crate::error::Result;
use crate::graph::{ActShape, BranchGraph, LayerKind};

/// Bytes per stored real in model files.
pub const PARAM_BYTES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerResources {
    pub layer: usize,
    /// Learnable weights and biases plus BN affine parameters.
    pub learnable: usize,
    /// Every stored real, BN running statistics included.
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    pub param_count: usize,
    pub param_bytes: usize,
    pub macs: u64,
    pub layers: Vec<LayerResources>,
}

/// Counts from layer hyperparameters alone.
pub fn count_resources<F: Real>(graph: &BranchGraph<F>) -> Result<Resources> {
    let shapes = graph.shapes()?;
    let mut layers = Vec::with_capacity(graph.layers.len());
    for (idx, layer) in graph.layers.iter().enumerate() {
        let (learnable, params, macs) = match layer.spec.kind {
            LayerKind::ConvBlock {
                in_channels: i,
                out_channels: o,
                kernel: k,
                ..
            } => {
                let spatial = match shapes[idx] {
                    ActShape::Spatial { h, w, .. } => h * w,
                    ActShape::Flat(_) => unreachable!("conv output is spatial"),
                };
                let conv = o * i * k * k + o;
                (conv + 2 * o, conv + 4 * o, (o * i * k * k * spatial) as u64)
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let n = in_features * out_features + out_features;
                (n, n, (in_features * out_features) as u64)
            }
            _ => (0, 0, 0),
        };
        layers.push(LayerResources {
            layer: idx,
            learnable,
            params,
            macs,
        });
    }
    let param_count = layers.iter().map(|l| l.params).sum();
    Ok(Resources {
        param_count,
        param_bytes: PARAM_BYTES * param_count,
        macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{tiny_cnn, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_and_conv_counts() {
        let rng = &mut ChaCha8Rng::seed_from_u64(0);
        let g = BranchGraph::<f32>::new([10, 1, 1], 10, vec![LayerSpec::dense(10, 10)], rng).unwrap();
        let r = count_resources(&g).unwrap();
        assert_eq!(r.layers[0].learnable, 110);
        assert_eq!(r.macs, 100);

        let specs = vec![LayerSpec::conv3x3(3, 16), LayerSpec::global_avgpool(), LayerSpec::dense(16, 2)];
        let g = BranchGraph::<f32>::new([3, 8, 8], 2, specs, rng).unwrap();
        let r = count_resources(&g).unwrap();
        // 448 for the convolution itself, then BN scale/shift and stats
        assert_eq!(r.layers[0].learnable - 32, 448);
        assert_eq!(r.layers[0].params, 448 + 64);
        assert_eq!(r.layers[0].macs, 16 * 27 * 64);
        assert_eq!(r.layers[1].macs, 0);
    }

    #[test]
    fn total_matches_stored_reals() {
        let g: BranchGraph = tiny_cnn([1, 28, 28], 10, [8, 16, 16, 32], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let r = count_resources(&g).unwrap();
        assert_eq!(r.param_count, g.flat_weights().len());
        let expect_macs: u64 = [8 * 9 * 784, 16 * 72 * 196, 16 * 144 * 49, 32 * 144 * 49, 320].iter().sum();
        assert_eq!(r.macs, expect_macs);
    }
}

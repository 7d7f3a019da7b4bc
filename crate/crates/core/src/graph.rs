//! Single-branch layer topology and weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tbnet_tensor::{conv_output_dim, ParamRef, Real, RunningStats, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Convolution, batch normalization and ReLU.
    ConvBlock {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool,
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Adds the output of layer `from` to the current activation.
    ResidualAdd { from: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::ConvBlock {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            prunable: true,
        }
    }

    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        Self::conv(in_channels, out_channels, 3, 1, 1)
    }

    pub fn maxpool() -> Self {
        Self {
            kind: LayerKind::MaxPool,
            prunable: false,
        }
    }

    pub fn global_avgpool() -> Self {
        Self {
            kind: LayerKind::GlobalAvgPool,
            prunable: false,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self {
            kind: LayerKind::Dense {
                in_features,
                out_features,
            },
            prunable: false,
        }
    }

    pub fn residual(from: usize) -> Self {
        Self {
            kind: LayerKind::ResidualAdd { from },
            prunable: false,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::ConvBlock { .. })
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. })
    }

    /// Surviving output channels of a conv block or outputs of a dense layer.
    pub fn channel_count(&self) -> Option<usize> {
        match self.kind {
            LayerKind::ConvBlock { out_channels, .. } => Some(out_channels),
            LayerKind::Dense { out_features, .. } => Some(out_features),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<F: Real> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub stats: RunningStats<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<F: Real> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<F: Real> {
    None,
    Conv(ConvParams<F>),
    Dense(DenseParams<F>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F: Real = f32> {
    pub spec: LayerSpec,
    pub params: LayerParams<F>,
}

/// Activation shape after a layer, batch axis excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn elements(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(f) => f,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Spatial { c, .. } => c,
            ActShape::Flat(f) => f,
        }
    }

    /// Elements per channel.
    pub fn spatial(&self) -> usize {
        match *self {
            ActShape::Spatial { h, w, .. } => h * w,
            ActShape::Flat(_) => 1,
        }
    }

    pub fn with_batch(&self, n: usize) -> Vec<usize> {
        match *self {
            ActShape::Spatial { c, h, w } => vec![n, c, h, w],
            ActShape::Flat(f) => vec![n, f],
        }
    }
}

/// Layer topology and weights of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGraph<F: Real = f32> {
    /// `[C, H, W]` of one input sample.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer<F>>,
}

fn normal_tensor<F: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::from_f64(dist.sample(rng)))
}

impl<F: Real> LayerParams<F> {
    /// Fresh parameters: fan-in scaled normal weights, zero biases, unit
    /// BN scale.
    pub fn init(spec: &LayerSpec, rng: &mut impl Rng) -> Self {
        match spec.kind {
            LayerKind::ConvBlock {
                in_channels: i,
                out_channels: o,
                kernel: k,
                ..
            } => {
                let fan_in = (i * k * k) as f64;
                LayerParams::Conv(ConvParams {
                    weight: normal_tensor(&[o, i, k, k], (2.0 / fan_in).sqrt(), rng).into_param(),
                    bias: Tensor::zeros(&[o]).into_param(),
                    gamma: Tensor::full(&[o], F::ONE).into_param(),
                    beta: Tensor::zeros(&[o]).into_param(),
                    stats: RunningStats::new(o),
                })
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => LayerParams::Dense(DenseParams {
                weight: normal_tensor(&[out_features, in_features], (1.0 / in_features as f64).sqrt(), rng)
                    .into_param(),
                bias: Tensor::zeros(&[out_features]).into_param(),
            }),
            _ => LayerParams::None,
        }
    }

    /// All-zero parameters of the right shapes, trainable.
    pub fn zeros(spec: &LayerSpec) -> Self {
        match spec.kind {
            LayerKind::ConvBlock {
                in_channels: i,
                out_channels: o,
                kernel: k,
                ..
            } => LayerParams::Conv(ConvParams {
                weight: Tensor::zeros(&[o, i, k, k]).into_param(),
                bias: Tensor::zeros(&[o]).into_param(),
                gamma: Tensor::zeros(&[o]).into_param(),
                beta: Tensor::zeros(&[o]).into_param(),
                stats: RunningStats::new(o),
            }),
            LayerKind::Dense {
                in_features,
                out_features,
            } => LayerParams::Dense(DenseParams {
                weight: Tensor::zeros(&[out_features, in_features]).into_param(),
                bias: Tensor::zeros(&[out_features]).into_param(),
            }),
            _ => LayerParams::None,
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv(p) => vec![
                p.weight.data_mut(),
                p.bias.data_mut(),
                p.gamma.data_mut(),
                p.beta.data_mut(),
                &mut p.stats.mean,
                &mut p.stats.var,
            ],
            LayerParams::Dense(p) => vec![p.weight.data_mut(), p.bias.data_mut()],
        }
    }

    /// Every stored real in serialization order.
    pub fn tensors(&self) -> Vec<&[F]> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv(p) => vec![
                p.weight.data(),
                p.bias.data(),
                p.gamma.data(),
                p.beta.data(),
                &p.stats.mean,
                &p.stats.var,
            ],
            LayerParams::Dense(p) => vec![p.weight.data(), p.bias.data()],
        }
    }

    pub fn cast<G: Real>(&self) -> LayerParams<G> {
        match self {
            LayerParams::None => LayerParams::None,
            LayerParams::Conv(p) => LayerParams::Conv(ConvParams {
                weight: p.weight.cast(),
                bias: p.bias.cast(),
                gamma: p.gamma.cast(),
                beta: p.beta.cast(),
                stats: RunningStats {
                    mean: p.stats.mean.iter().map(|v| G::from_f64(v.to_f64())).collect(),
                    var: p.stats.var.iter().map(|v| G::from_f64(v.to_f64())).collect(),
                    momentum: G::from_f64(p.stats.momentum.to_f64()),
                },
            }),
            LayerParams::Dense(p) => LayerParams::Dense(DenseParams {
                weight: p.weight.cast(),
                bias: p.bias.cast(),
            }),
        }
    }

    fn trainable_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv(p) => vec![
                ("weight", &mut p.weight),
                ("bias", &mut p.bias),
                ("gamma", &mut p.gamma),
                ("beta", &mut p.beta),
            ],
            LayerParams::Dense(p) => vec![("weight", &mut p.weight), ("bias", &mut p.bias)],
        }
    }
}

impl<F: Real> BranchGraph<F> {
    /// Builds a graph with freshly initialized weights and validates it.
    pub fn new(input_shape: [usize; 3], classes: usize, specs: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        let layers = specs
            .into_iter()
            .map(|spec| Layer {
                params: LayerParams::init(&spec, rng),
                spec,
            })
            .collect();
        let graph = Self {
            input_shape,
            classes,
            layers,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Output shape of every layer; fails on any incompatibility.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Graph(format!("empty input shape {:?}", self.input_shape)));
        }
        let mut cur = ActShape::Spatial { c, h, w };
        let mut out: Vec<ActShape> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Graph(format!("layer {idx}: {msg}"));
            cur = match (layer.spec.kind, cur) {
                (
                    LayerKind::ConvBlock {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    ActShape::Spatial { c, h, w },
                ) => {
                    if in_channels != c {
                        return Err(bad(format!("conv expects {in_channels} channels, receives {c}")));
                    }
                    if out_channels == 0 {
                        return Err(bad("conv block has no channels".into()));
                    }
                    let (Some(oh), Some(ow)) = (
                        conv_output_dim(h, kernel, stride, padding),
                        conv_output_dim(w, kernel, stride, padding),
                    ) else {
                        return Err(bad(format!("kernel {kernel}/stride {stride} invalid for {h}x{w}")));
                    };
                    ActShape::Spatial {
                        c: out_channels,
                        h: oh,
                        w: ow,
                    }
                }
                (LayerKind::MaxPool, ActShape::Spatial { c, h, w }) => {
                    if h < 2 || w < 2 {
                        return Err(bad(format!("cannot pool {h}x{w}")));
                    }
                    ActShape::Spatial { c, h: h / 2, w: w / 2 }
                }
                (LayerKind::GlobalAvgPool, ActShape::Spatial { c, .. }) => ActShape::Flat(c),
                (
                    LayerKind::Dense {
                        in_features,
                        out_features,
                    },
                    shape,
                ) => {
                    if shape.elements() != in_features {
                        return Err(bad(format!(
                            "dense expects {in_features} features, receives {}",
                            shape.elements()
                        )));
                    }
                    ActShape::Flat(out_features)
                }
                (LayerKind::ResidualAdd { from }, shape) => {
                    if from >= idx {
                        return Err(bad(format!("residual source {from} is not an earlier layer")));
                    }
                    if out[from] != shape {
                        return Err(bad(format!("residual shapes {:?} and {shape:?} differ", out[from])));
                    }
                    shape
                }
                (kind, shape) => return Err(bad(format!("{kind:?} cannot follow activation {shape:?}"))),
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let dense: Vec<usize> = (0..self.layers.len()).filter(|&i| self.layers[i].spec.is_dense()).collect();
        if dense.len() != 1 || dense[0] + 1 != self.layers.len() {
            return Err(Error::Graph("exactly one dense classifier must terminate the branch".into()));
        }
        if shapes.last() != Some(&ActShape::Flat(self.classes)) {
            return Err(Error::Graph(format!("classifier must emit {} classes", self.classes)));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            let ok = match (&layer.spec.kind, &layer.params) {
                (
                    LayerKind::ConvBlock {
                        in_channels: i,
                        out_channels: o,
                        kernel: k,
                        ..
                    },
                    LayerParams::Conv(p),
                ) => {
                    p.weight.shape() == [*o, *i, *k, *k]
                        && p.bias.len() == *o
                        && p.gamma.len() == *o
                        && p.beta.len() == *o
                        && p.stats.mean.len() == *o
                        && p.stats.var.len() == *o
                }
                (
                    LayerKind::Dense {
                        in_features,
                        out_features,
                    },
                    LayerParams::Dense(p),
                ) => p.weight.shape() == [*out_features, *in_features] && p.bias.len() == *out_features,
                (LayerKind::ConvBlock { .. } | LayerKind::Dense { .. }, _) => false,
                (_, LayerParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Graph(format!("layer {idx}: parameters do not match spec")));
            }
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            if let LayerKind::ResidualAdd { from } = layer.spec.kind {
                for src in [self.channel_source(from), self.channel_source(idx - 1)].into_iter().flatten() {
                    if self.layers[src].spec.prunable {
                        return Err(Error::Graph(format!(
                            "conv layer {src} feeds residual add {idx} and must not be prunable"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// The conv block whose channels reach the output of `layer`, looking
    /// back through pooling and residual adds.
    pub fn channel_source(&self, layer: usize) -> Option<usize> {
        let mut i = layer;
        loop {
            match self.layers[i].spec.kind {
                LayerKind::ConvBlock { .. } => return Some(i),
                LayerKind::MaxPool | LayerKind::GlobalAvgPool | LayerKind::ResidualAdd { .. } => {
                    if i == 0 {
                        return None;
                    }
                    i -= 1;
                }
                LayerKind::Dense { .. } => return None,
            }
        }
    }

    /// Clears `prunable` on every conv block whose channels meet a residual add.
    pub fn mark_residual_constraints(&mut self) {
        let mut frozen = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            if let LayerKind::ResidualAdd { from } = layer.spec.kind {
                frozen.extend(self.channel_source(from));
                if idx > 0 {
                    frozen.extend(self.channel_source(idx - 1));
                }
            }
        }
        for i in frozen {
            self.layers[i].spec.prunable = false;
        }
    }

    pub fn has_residuals(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.spec.kind, LayerKind::ResidualAdd { .. }))
    }

    /// The main path with every residual add removed.
    pub fn without_residuals(&self) -> Self {
        Self {
            input_shape: self.input_shape,
            classes: self.classes,
            layers: self
                .layers
                .iter()
                .filter(|l| !matches!(l.spec.kind, LayerKind::ResidualAdd { .. }))
                .cloned()
                .collect(),
        }
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].spec.is_conv()).collect()
    }

    pub fn dense_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn conv_params(&self, layer: usize) -> Option<&ConvParams<F>> {
        match &self.layers.get(layer)?.params {
            LayerParams::Conv(p) => Some(p),
            _ => None,
        }
    }

    pub fn conv_params_mut(&mut self, layer: usize) -> Option<&mut ConvParams<F>> {
        match &mut self.layers.get_mut(layer)?.params {
            LayerParams::Conv(p) => Some(p),
            _ => None,
        }
    }

    pub fn dense_params(&self) -> Option<&DenseParams<F>> {
        match &self.layers.last()?.params {
            LayerParams::Dense(p) => Some(p),
            _ => None,
        }
    }

    /// Trainable tensors in a stable order, named `<prefix>.<layer>.<name>`.
    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_, F>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params.trainable_mut().into_iter().map(move |(name, tensor)| ParamRef {
                    name: format!("{prefix}.{i}.{name}"),
                    tensor,
                })
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut("") {
            p.tensor.zero_grad();
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut("") {
            p.tensor.requires_grad = trainable;
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.layers.iter().any(|l| match &l.params {
            LayerParams::Conv(p) => p.weight.requires_grad,
            LayerParams::Dense(p) => p.weight.requires_grad,
            LayerParams::None => false,
        })
    }

    /// Flat copy of every stored real in serialization order.
    pub fn flat_weights(&self) -> Vec<F> {
        self.layers
            .iter()
            .flat_map(|l| l.params.tensors().into_iter().flat_map(|t| t.iter().copied()))
            .collect()
    }

    pub fn cast<G: Real>(&self) -> BranchGraph<G> {
        BranchGraph {
            input_shape: self.input_shape,
            classes: self.classes,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    params: l.params.cast(),
                })
                .collect(),
        }
    }

    /// Sets every weight, bias and BN affine parameter to zero.
    pub fn zero_weights(&mut self) {
        for p in self.params_mut("") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = F::ZERO);
        }
    }
}

/// Plain four-conv-block CNN: conv, pool, conv, pool, conv, conv, GAP, dense.
pub fn tiny_cnn<F: Real>(input_shape: [usize; 3], classes: usize, widths: [usize; 4], rng: &mut impl Rng) -> Result<BranchGraph<F>> {
    let [w1, w2, w3, w4] = widths;
    let specs = vec![
        LayerSpec::conv3x3(input_shape[0], w1),
        LayerSpec::maxpool(),
        LayerSpec::conv3x3(w1, w2),
        LayerSpec::maxpool(),
        LayerSpec::conv3x3(w2, w3),
        LayerSpec::conv3x3(w3, w4),
        LayerSpec::global_avgpool(),
        LayerSpec::dense(w4, classes),
    ];
    BranchGraph::new(input_shape, classes, specs, rng)
}

/// Small residual network: a stem, one identity-shortcut block and a
/// widening conv before the classifier.
pub fn tiny_resnet<F: Real>(input_shape: [usize; 3], classes: usize, widths: [usize; 3], rng: &mut impl Rng) -> Result<BranchGraph<F>> {
    let [stem, inner, head] = widths;
    let specs = vec![
        LayerSpec::conv3x3(input_shape[0], stem),
        LayerSpec::maxpool(),
        LayerSpec::conv3x3(stem, inner),
        LayerSpec::conv3x3(inner, stem),
        LayerSpec::residual(1),
        LayerSpec::maxpool(),
        LayerSpec::conv3x3(stem, head),
        LayerSpec::global_avgpool(),
        LayerSpec::dense(head, classes),
    ];
    let mut layers: Vec<Layer<F>> = specs
        .into_iter()
        .map(|spec| Layer {
            params: LayerParams::init(&spec, rng),
            spec,
        })
        .collect();
    let mut graph = BranchGraph {
        input_shape,
        classes,
        layers: std::mem::take(&mut layers),
    };
    graph.mark_residual_constraints();
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_cnn_shapes() {
        let g: BranchGraph = tiny_cnn([1, 28, 28], 10, [8, 16, 16, 32], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = g.shapes().unwrap();
        assert_eq!(s[0], ActShape::Spatial { c: 8, h: 28, w: 28 });
        assert_eq!(s[3], ActShape::Spatial { c: 16, h: 7, w: 7 });
        assert_eq!(*s.last().unwrap(), ActShape::Flat(10));
        assert_eq!(g.conv_layers(), vec![0, 2, 4, 5]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let specs = vec![LayerSpec::conv3x3(1, 4), LayerSpec::conv3x3(5, 4), LayerSpec::global_avgpool(), LayerSpec::dense(4, 2)];
        let err = BranchGraph::<f32>::new([1, 6, 6], 2, specs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn rejects_missing_or_inner_classifier() {
        let rng = &mut ChaCha8Rng::seed_from_u64(0);
        let specs = vec![LayerSpec::conv3x3(1, 4), LayerSpec::global_avgpool()];
        assert!(BranchGraph::<f32>::new([1, 6, 6], 4, specs, rng).is_err());
        let specs = vec![LayerSpec::dense(36, 36), LayerSpec::dense(36, 2)];
        assert!(BranchGraph::<f32>::new([1, 6, 6], 2, specs, rng).is_err());
    }

    #[test]
    fn residual_endpoints_are_not_prunable() {
        let g: BranchGraph = tiny_resnet([1, 12, 12], 3, [4, 6, 8], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let prunable: Vec<bool> = g.conv_layers().iter().map(|&i| g.layers[i].spec.prunable).collect();
        assert_eq!(prunable, vec![false, true, false, true]);
        let mut bad = g.clone();
        bad.layers[3].spec.prunable = true;
        assert!(bad.validate().is_err());
        let main = g.without_residuals();
        assert!(!main.has_residuals());
        main.validate().unwrap();
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a: BranchGraph = tiny_cnn([1, 8, 8], 3, [2, 3, 3, 4], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: BranchGraph = tiny_cnn([1, 8, 8], 3, [2, 3, 3, 4], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}

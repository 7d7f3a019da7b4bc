//! Iterative two-branch structured channel pruning.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tbnet_tensor::Tensor;

use crate::container::{read_checkpoint, write_checkpoint, Meta};
use crate::data::Dataset;
use crate::error::{io_err, Error, Result};
use crate::graph::{BranchGraph, LayerKind, LayerParams};
use crate::train::{accuracy_two_branch, train_transfer, TrainConfig};
use crate::twobranch::TwoBranchModel;

/// Keep-bits of one prunable layer, paired across branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub ree_layer: usize,
    pub tee_layer: usize,
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn kept(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub layers: Vec<LayerMask>,
    /// Flat indices kept only because their layer would otherwise be empty.
    pub forced: Vec<usize>,
}

impl ChannelMask {
    pub fn popcount(&self) -> usize {
        self.layers.iter().map(|l| l.keep.iter().filter(|&&b| b).count()).sum()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.keep.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat bit vector in index-table order.
    pub fn bits(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.keep.iter().copied()).collect()
    }

    pub fn all_ones(model: &TwoBranchModel) -> Result<Self> {
        let table = index_table(model)?;
        let mut layers = table.layers;
        for l in &mut layers {
            l.keep.iter_mut().for_each(|b| *b = true);
        }
        Ok(Self { layers, forced: vec![] })
    }
}

/// Position of a flat channel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelIndex {
    /// Index into the mask's layer list.
    pub mask_layer: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTable {
    pub entries: Vec<ChannelIndex>,
    /// Layer skeleton with every bit cleared.
    layers: Vec<LayerMask>,
}

impl IndexTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnWeights {
    pub ree: Vec<f64>,
    pub tee: Vec<f64>,
    pub table: IndexTable,
}

fn index_table(model: &TwoBranchModel) -> Result<IndexTable> {
    let mut entries = Vec::new();
    let mut layers = Vec::new();
    for m in model.paired_convs() {
        let (rs, ts) = (model.ree.layers[m.ree_layer].spec, model.tee.layers[m.tee_layer].spec);
        if !(rs.prunable && ts.prunable) {
            continue;
        }
        let (cr, ct) = (rs.channel_count().unwrap(), ts.channel_count().unwrap());
        if cr != ct {
            return Err(Error::Pairing(format!(
                "layers {}/{} hold {cr} and {ct} channels",
                m.ree_layer, m.tee_layer
            )));
        }
        let mask_layer = layers.len();
        entries.extend((0..ct).map(|channel| ChannelIndex { mask_layer, channel }));
        layers.push(LayerMask {
            ree_layer: m.ree_layer,
            tee_layer: m.tee_layer,
            keep: vec![false; ct],
        });
    }
    Ok(IndexTable { entries, layers })
}

/// `|γ|` of every prunable channel in both branches, flattened layer by
/// layer.
pub fn collect_bn_weights(model: &TwoBranchModel) -> Result<BnWeights> {
    if model.is_finalized() {
        return Err(Error::Finalize("pruning applies only before finalization".into()));
    }
    let table = index_table(model)?;
    let mut ree = Vec::with_capacity(table.len());
    let mut tee = Vec::with_capacity(table.len());
    for l in &table.layers {
        let gr = model.ree.conv_params(l.ree_layer).expect("conv").gamma.data();
        let gt = model.tee.conv_params(l.tee_layer).expect("conv").gamma.data();
        if gr.len() != gt.len() {
            return Err(Error::Pairing(format!(
                "BN of layers {}/{} holds {} and {} scales",
                l.ree_layer,
                l.tee_layer,
                gr.len(),
                gt.len()
            )));
        }
        ree.extend(gr.iter().map(|v| v.abs() as f64));
        tee.extend(gt.iter().map(|v| v.abs() as f64));
    }
    Ok(BnWeights { ree, tee, table })
}

pub fn composite_weights(bn_r: &[f64], bn_t: &[f64]) -> Result<Vec<f64>> {
    if bn_r.len() != bn_t.len() {
        return Err(Error::Mask(format!("{} vs {} BN weights", bn_r.len(), bn_t.len())));
    }
    Ok(bn_r.iter().zip(bn_t).map(|(a, b)| a + b).collect())
}

/// Ascending sort, then the element at `floor(N * p)`.
pub fn compute_threshold(bn: &[f64], p: f64) -> Result<f64> {
    if bn.len() < 2 {
        return Err(Error::Mask(format!("threshold needs at least 2 channels, got {}", bn.len())));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("pruning ratio must be in (0, 1), got {p}")));
    }
    let mut sorted = bn.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(bn.len() as f64 * p).floor() as usize])
}

/// Keeps channels strictly above `threshold`; a layer left empty keeps its
/// largest channel (the first one on ties).
pub fn build_mask(bn: &[f64], threshold: f64, table: &IndexTable) -> Result<ChannelMask> {
    if bn.len() != table.len() {
        return Err(Error::Mask(format!("{} weights for {} channels", bn.len(), table.len())));
    }
    let mut layers = table.layers.clone();
    for (v, e) in bn.iter().zip(&table.entries) {
        layers[e.mask_layer].keep[e.channel] = *v > threshold;
    }
    let mut forced = Vec::new();
    let mut offset = 0;
    for l in &mut layers {
        let n = l.keep.len();
        if !l.keep.contains(&true) {
            let vals = &bn[offset..offset + n];
            let best = (0..n).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
            l.keep[best] = true;
            forced.push(offset + best);
        }
        offset += n;
    }
    Ok(ChannelMask { layers, forced })
}

/// The layer reading the channels of conv `layer`, and how: a conv taking
/// them as input channels, or the dense classifier taking `spatial` features
/// per channel.
enum Consumer {
    Conv(usize),
    Dense { layer: usize, spatial: usize },
}

fn consumer(graph: &BranchGraph, layer: usize) -> Result<Consumer> {
    let shapes = graph.shapes()?;
    for j in layer + 1..graph.layers.len() {
        match graph.layers[j].spec.kind {
            LayerKind::ConvBlock { .. } => return Ok(Consumer::Conv(j)),
            LayerKind::Dense { .. } => {
                return Ok(Consumer::Dense {
                    layer: j,
                    spatial: shapes[j - 1].spatial(),
                })
            }
            LayerKind::ResidualAdd { .. } => {
                return Err(Error::Mask(format!("channels of layer {layer} reach a residual add")))
            }
            LayerKind::MaxPool | LayerKind::GlobalAvgPool => {}
        }
    }
    Err(Error::Graph(format!("layer {layer} has no consumer")))
}

fn param(t: Tensor<f32>) -> Tensor<f32> {
    t.into_param()
}

fn prune_branch(graph: &mut BranchGraph, layer: usize, keep: &[usize]) -> Result<()> {
    let next = consumer(graph, layer)?;
    let p = graph
        .conv_params_mut(layer)
        .ok_or_else(|| Error::Mask(format!("layer {layer} is not a conv block")))?;
    let trainable = p.weight.requires_grad;
    let rows = |t: &Tensor<f32>| t.gather_rows(keep).map(param);
    p.weight = rows(&p.weight)?;
    p.bias = rows(&p.bias)?;
    p.gamma = rows(&p.gamma)?;
    p.beta = rows(&p.beta)?;
    p.stats.mean = keep.iter().map(|&c| p.stats.mean[c]).collect();
    p.stats.var = keep.iter().map(|&c| p.stats.var[c]).collect();
    if let LayerKind::ConvBlock { out_channels, .. } = &mut graph.layers[layer].spec.kind {
        *out_channels = keep.len();
    }
    match next {
        Consumer::Conv(j) => {
            let l = &mut graph.layers[j];
            if let (LayerParams::Conv(q), LayerKind::ConvBlock { in_channels, .. }) = (&mut l.params, &mut l.spec.kind) {
                q.weight = param(q.weight.select_channels(keep)?);
                *in_channels = keep.len();
            }
        }
        Consumer::Dense { layer: j, spatial } => {
            let l = &mut graph.layers[j];
            if let (LayerParams::Dense(q), LayerKind::Dense { in_features, .. }) = (&mut l.params, &mut l.spec.kind) {
                let out = q.weight.dim(0);
                let c = q.weight.dim(1) / spatial;
                let w = q.weight.clone().reshape(&[out, c, spatial])?.select_channels(keep)?;
                q.weight = param(w.reshape(&[out, keep.len() * spatial])?);
                *in_features = keep.len() * spatial;
            }
        }
    }
    graph.set_trainable(trainable);
    Ok(())
}

/// Removes every cleared channel from both branches: its filter, bias, BN
/// scale, shift and statistics, and the matching input slices of the next
/// layer.
pub fn apply_mask(model: &mut TwoBranchModel, mask: &ChannelMask) -> Result<()> {
    let skeleton = index_table(model)?.layers;
    let matches = skeleton.len() == mask.layers.len()
        && skeleton
            .iter()
            .zip(&mask.layers)
            .all(|(s, m)| (s.ree_layer, s.tee_layer, s.keep.len()) == (m.ree_layer, m.tee_layer, m.keep.len()));
    if !matches {
        return Err(Error::Mask("mask layout does not match the model's prunable layers".into()));
    }
    for l in &mask.layers {
        let keep = l.kept();
        if keep.is_empty() {
            return Err(Error::Mask(format!("mask empties layer {}", l.tee_layer)));
        }
        if keep.len() == l.keep.len() {
            continue;
        }
        prune_branch(&mut model.ree, l.ree_layer, &keep)?;
        prune_branch(&mut model.tee, l.tee_layer, &keep)?;
    }
    model.validate()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneCheckpoint {
    /// 0 for the unpruned starting model.
    pub iteration: usize,
    pub model: TwoBranchModel,
    /// Two-branch test accuracy after this iteration's retraining.
    pub accuracy: f64,
    /// Mask applied in this iteration, against the previous checkpoint.
    pub mask: Option<ChannelMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of all prunable channels removed per iteration.
    pub ratio: f64,
    /// Largest tolerated accuracy drop against the victim, as a fraction.
    pub theta_drop: f64,
    pub retrain: TrainConfig,
    pub max_iterations: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            ratio: 0.1,
            theta_drop: 0.02,
            retrain: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            max_iterations: 20,
        }
    }
}

/// Record of an iteration that was measured and then discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedIteration {
    pub iteration: usize,
    pub accuracy: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum PruneStatus {
    /// Stopped after `accepted` iterations stayed within budget.
    Accepted { accepted: usize },
    /// Not even the starting model was within budget, or the first pruning
    /// iteration broke it; the unpruned model is returned.
    NoneAccepted { warning: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub model: TwoBranchModel,
    /// The starting model, then every accepted iteration.
    pub history: Vec<PruneCheckpoint>,
    pub rejected: Option<RejectedIteration>,
    pub status: PruneStatus,
}

/// Prune, retrain and evaluate until the accuracy drop against
/// `victim_accuracy` exceeds the budget, then keep the last iteration within
/// it. `on_checkpoint` sees every accepted checkpoint.
pub fn iterative_prune(
    model: TwoBranchModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &PruneConfig,
    victim_accuracy: f64,
    mut on_checkpoint: impl FnMut(&PruneCheckpoint) -> Result<()>,
) -> Result<PruneOutcome> {
    if !(cfg.ratio > 0.0 && cfg.ratio < 1.0) {
        return Err(Error::Config(format!("pruning ratio must be in (0, 1), got {}", cfg.ratio)));
    }
    if !(cfg.theta_drop >= 0.0 && cfg.theta_drop.is_finite()) {
        return Err(Error::Config(format!("theta_drop must be >= 0, got {}", cfg.theta_drop)));
    }
    let start = PruneCheckpoint {
        iteration: 0,
        accuracy: accuracy_two_branch(&model, test)?,
        model,
        mask: None,
    };
    let start_drop = victim_accuracy - start.accuracy;
    on_checkpoint(&start)?;
    let mut history = vec![start];
    let mut rejected = None;
    if start_drop > cfg.theta_drop {
        let warning = format!(
            "starting model is already {:.2} points below the victim",
            100.0 * start_drop
        );
        log::warn!("{warning}");
        return Ok(finish(history, None, Some(warning)));
    }
    for iteration in 1..=cfg.max_iterations {
        let prev = history.last().expect("non-empty");
        let bn = collect_bn_weights(&prev.model)?;
        let composite = composite_weights(&bn.ree, &bn.tee)?;
        let threshold = compute_threshold(&composite, cfg.ratio)?;
        let mask = build_mask(&composite, threshold, &bn.table)?;
        if mask.popcount() == mask.len() {
            log::info!("iteration {iteration}: nothing left to prune");
            break;
        }
        let mut model = prev.model.clone();
        apply_mask(&mut model, &mask)?;
        let retrain = TrainConfig {
            seed: cfg.retrain.seed.wrapping_add(iteration as u64),
            ..cfg.retrain.clone()
        };
        train_transfer(&mut model, train, None, &retrain, |_| Ok(()))?;
        let accuracy = accuracy_two_branch(&model, test)?;
        let drop = victim_accuracy - accuracy;
        log::info!(
            "iteration {iteration}: {} of {} channels kept, accuracy {accuracy:.4}, drop {:.2} points",
            mask.popcount(),
            mask.len(),
            100.0 * drop
        );
        if drop > cfg.theta_drop {
            rejected = Some(RejectedIteration {
                iteration,
                accuracy,
                drop,
            });
            break;
        }
        let cp = PruneCheckpoint {
            iteration,
            model,
            accuracy,
            mask: Some(mask),
        };
        on_checkpoint(&cp)?;
        history.push(cp);
    }
    let warning = (history.len() == 1).then(|| "no pruning iteration stayed within the accuracy budget".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(finish(history, rejected, warning))
}

fn finish(history: Vec<PruneCheckpoint>, rejected: Option<RejectedIteration>, warning: Option<String>) -> PruneOutcome {
    let status = match warning {
        Some(warning) => PruneStatus::NoneAccepted { warning },
        None => PruneStatus::Accepted {
            accepted: history.len() - 1,
        },
    };
    PruneOutcome {
        model: history.last().expect("non-empty").model.clone(),
        history,
        rejected,
        status,
    }
}

/// One line of the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub iteration: usize,
    pub file: String,
    pub accuracy: f64,
    pub tee_channels: usize,
}

pub fn checkpoint_file_name(iteration: usize) -> String {
    format!("checkpoint-{iteration:03}.tbnt")
}

/// Writes a checkpoint file; `meta` gains the iteration, accuracy and mask.
pub fn save_checkpoint(dir: &Path, cp: &PruneCheckpoint, meta: Meta) -> Result<PathBuf> {
    let path = dir.join(checkpoint_file_name(cp.iteration));
    let meta = meta
        .with("iteration", cp.iteration)
        .with("accuracy", cp.accuracy)
        .with("mask", &cp.mask);
    write_checkpoint(&path, &cp.model, meta)?;
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(PruneCheckpoint, Meta)> {
    let (model, meta) = read_checkpoint(path)?;
    let cp = PruneCheckpoint {
        iteration: meta.get("iteration")?,
        accuracy: meta.get("accuracy")?,
        mask: meta.get("mask")?,
        model,
    };
    Ok((cp, meta))
}

/// Line-delimited JSON index of the accepted checkpoints.
pub fn write_manifest(path: &Path, history: &[PruneCheckpoint]) -> Result<()> {
    let mut text = String::new();
    for cp in history {
        let entry = ManifestEntry {
            iteration: cp.iteration,
            file: checkpoint_file_name(cp.iteration),
            accuracy: cp.accuracy,
            tee_channels: cp.model.channel_totals().1,
        };
        text.push_str(&serde_json::to_string(&entry)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Loads every checkpoint listed in a manifest, in order.
pub fn load_history(manifest: &Path) -> Result<Vec<PruneCheckpoint>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|e| load_checkpoint(&dir.join(&e.file)).map(|(cp, _)| cp))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Mode;
    use crate::graph::{tiny_cnn, tiny_resnet};
    use crate::twobranch::{init_twobranch, InitOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(widths: [usize; 4]) -> TwoBranchModel {
        let v = tiny_cnn([1, 8, 8], 3, widths, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        init_twobranch(&v, 5, InitOptions::default()).unwrap()
    }

    #[test]
    fn golden_trace() {
        let bn = composite_weights(&[0.3, 0.05, 0.2, 0.4], &[0.2, 0.05, 0.1, 0.1]).unwrap();
        let expect = [0.5, 0.1, 0.3, 0.5];
        assert!(bn.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12));
        let t = compute_threshold(&bn, 0.25).unwrap();
        assert_eq!(t, bn[2]);
        let table = IndexTable {
            entries: (0..4).map(|channel| ChannelIndex { mask_layer: 0, channel }).collect(),
            layers: vec![LayerMask {
                ree_layer: 0,
                tee_layer: 0,
                keep: vec![false; 4],
            }],
        };
        let mask = build_mask(&bn, t, &table).unwrap();
        assert_eq!(mask.bits(), vec![true, false, false, true]);
        assert!(mask.forced.is_empty());
    }

    #[test]
    fn threshold_edges() {
        assert!(compute_threshold(&[1.0], 0.5).is_err());
        assert!(compute_threshold(&[1.0, 2.0], 0.0).is_err());
        assert!(compute_threshold(&[1.0, 2.0], 1.0).is_err());
        let bn = [0.4, 0.2, 0.9, 0.7];
        assert_eq!(compute_threshold(&bn, 0.24).unwrap(), 0.2);
        assert_eq!(compute_threshold(&[0.3; 5], 0.5).unwrap(), 0.3);
    }

    #[test]
    fn counts_and_table() {
        let m = model([4, 4, 3, 2]);
        let bn = collect_bn_weights(&m).unwrap();
        assert_eq!(bn.ree.len(), 13);
        assert_eq!(bn.table.entries[4], ChannelIndex { mask_layer: 1, channel: 0 });
        for (i, e) in bn.table.entries.iter().enumerate() {
            let l = &bn.table.layers[e.mask_layer];
            let g = m.tee.conv_params(l.tee_layer).unwrap().gamma.data()[e.channel];
            assert_eq!(bn.tee[i], g.abs() as f64);
        }
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let mut m = model([4, 4, 3, 2]);
        let before = m.clone();
        let mask = ChannelMask::all_ones(&m).unwrap();
        apply_mask(&mut m, &mask).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn structural_slices() {
        let mut m = model([4, 4, 3, 2]);
        let before = m.clone();
        let mut mask = ChannelMask::all_ones(&m).unwrap();
        mask.layers[0].keep = vec![true, false, true, false];
        apply_mask(&mut m, &mask).unwrap();
        for (after, pre) in [(&m.ree, &before.ree), (&m.tee, &before.tee)] {
            let w = &after.conv_params(2).unwrap().weight;
            assert_eq!(w.shape(), &[4, 2, 3, 3]);
            let old = pre.conv_params(2).unwrap().weight.select_channels(&[0, 2]).unwrap();
            assert_eq!(w.data(), old.data());
            assert_eq!(after.conv_params(0).unwrap().gamma.len(), 2);
        }
    }

    #[test]
    fn dead_channel_prunes_cleanly() {
        let mut m = model([4, 4, 3, 2]);
        for g in [&mut m.ree, &mut m.tee] {
            let p = g.conv_params_mut(4).unwrap();
            p.gamma.data_mut()[1] = 0.0;
            p.beta.data_mut()[1] = 0.0;
        }
        let x = Tensor::from_fn(&[5, 1, 8, 8], |i| ((i * 7919) % 23) as f32 / 11.0 - 1.0);
        let before = m.forward(&x, Mode::Eval).unwrap().logits;
        let mut mask = ChannelMask::all_ones(&m).unwrap();
        mask.layers[2].keep[1] = false;
        apply_mask(&mut m, &mask).unwrap();
        let after = m.forward(&x, Mode::Eval).unwrap().logits;
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn min_channel_safeguard() {
        let m = model([3, 4, 3, 2]);
        let bn = collect_bn_weights(&m).unwrap();
        let mut comp = vec![1.0; bn.ree.len()];
        comp[..3].copy_from_slice(&[0.1, 0.3, 0.2]);
        let mask = build_mask(&comp, 0.3, &bn.table).unwrap();
        assert_eq!(mask.layers[0].keep, vec![false, true, false]);
        assert_eq!(mask.forced, vec![1]);
        // popcount = N - |{bn <= T}| + forced
        let at_or_below = comp.iter().filter(|&&v| v <= 0.3).count();
        assert_eq!(mask.popcount(), comp.len() - at_or_below + mask.forced.len());
        let all_equal = build_mask(&vec![0.5; comp.len()], 0.5, &bn.table).unwrap();
        assert_eq!(all_equal.popcount(), 4);
    }

    #[test]
    fn mask_drift_is_rejected() {
        let mut m = model([4, 4, 3, 2]);
        let mut mask = ChannelMask::all_ones(&m).unwrap();
        mask.layers[1].keep.pop();
        assert!(apply_mask(&mut m, &mask).is_err());
    }

    #[test]
    fn residual_endpoints_never_enter_the_mask() {
        let v = tiny_resnet([1, 8, 8], 3, [2, 3, 4], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let m = init_twobranch(&v, 1, InitOptions::default()).unwrap();
        let bn = collect_bn_weights(&m).unwrap();
        assert_eq!(bn.table.layers.len(), 2);
        assert_eq!(bn.ree.len(), 3 + 4);
        let mut pruned = m.clone();
        let mut mask = ChannelMask::all_ones(&m).unwrap();
        mask.layers[0].keep[0] = false;
        mask.layers[1].keep[3] = false;
        apply_mask(&mut pruned, &mask).unwrap();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 5) as f32);
        pruned.forward(&x, Mode::Eval).unwrap();
    }
}

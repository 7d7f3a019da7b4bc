//! Victim training and two-branch knowledge transfer.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tbnet_tensor::{sgd_step, softmax_cross_entropy, OptimizerState, ParamRef, Real, Tensor, TensorError};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::{backward_chain, commit_running_stats, forward_chain, run_chain, Mode};
use crate::graph::BranchGraph;
use crate::twobranch::TwoBranchModel;

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 500;

/// How the BN sparsity penalty combines the paired scales of a channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// `|γ_R + γ_T|`
    #[default]
    Composite,
    /// `|γ_R| + |γ_T|`
    Separate,
}

impl std::str::FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "composite" => Ok(Penalty::Composite),
            "separate" => Ok(Penalty::Separate),
            _ => Err(Error::Config(format!("penalty must be `composite` or `separate`, not `{s}`"))),
        }
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Penalty::Composite => "composite",
            Penalty::Separate => "separate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Divide the learning rate by ten every this many epochs; 0 keeps it.
    pub lr_schedule_period: usize,
    pub lambda_sparsity: f64,
    pub penalty: Penalty,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 64,
            lr_schedule_period: 5,
            lambda_sparsity: 1e-4,
            penalty: Penalty::Composite,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !ok(self.momentum) || self.momentum >= 1.0 {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !ok(self.weight_decay) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !ok(self.lambda_sparsity) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda_sparsity)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn optimizer<F: Real>(&self) -> OptimizerState<F> {
        OptimizerState::new(
            F::from_f64(self.lr),
            F::from_f64(self.momentum),
            F::from_f64(self.weight_decay),
            self.lr_schedule_period,
        )
    }
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub acc_two_branch: Option<f64>,
    pub acc_ree: Option<f64>,
    pub acc_tee: Option<f64>,
}

/// Value of the per-sample loss split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
}

fn sign<F: Real>(v: F) -> F {
    if v > F::ZERO {
        F::ONE
    } else if v < F::ZERO {
        -F::ONE
    } else {
        F::ZERO
    }
}

/// The sparsity term and its subgradient added to every paired BN scale.
/// Accumulates gradients only when `grads` is set.
pub fn sparsity_penalty<F: Real>(model: &mut TwoBranchModel<F>, lambda: f64, kind: Penalty, grads: bool) -> Result<f64> {
    let lam = F::from_f64(lambda);
    let mut total = 0.0;
    for m in model.paired_convs() {
        let gr = &mut model.ree.conv_params_mut(m.ree_layer).expect("conv layer").gamma;
        let gt = &mut model.tee.conv_params_mut(m.tee_layer).expect("conv layer").gamma;
        if gr.len() != gt.len() {
            return Err(Error::Pairing(format!(
                "merge at layers {}/{} pairs {} with {} BN channels",
                m.ree_layer,
                m.tee_layer,
                gr.len(),
                gt.len()
            )));
        }
        let (mut dr, mut dt) = (Vec::with_capacity(gr.len()), Vec::with_capacity(gr.len()));
        for (&r, &t) in gr.data().iter().zip(gt.data()) {
            match kind {
                Penalty::Composite => {
                    let s = r + t;
                    total += s.abs().to_f64();
                    dr.push(lam * sign(s));
                    dt.push(lam * sign(s));
                }
                Penalty::Separate => {
                    total += r.abs().to_f64() + t.abs().to_f64();
                    dr.push(lam * sign(r));
                    dt.push(lam * sign(t));
                }
            }
        }
        if grads {
            if gr.requires_grad {
                gr.accumulate_grad(&dr)?;
            }
            if gt.requires_grad {
                gt.accumulate_grad(&dt)?;
            }
        }
    }
    Ok(lambda * total)
}

/// Mean cross-entropy of the merged logits plus the BN sparsity penalty.
/// Leaves the gradients of this batch (and only this batch) in the model.
pub fn loss_eq1<F: Real>(
    model: &mut TwoBranchModel<F>,
    x: &Tensor<F>,
    labels: &[usize],
    lambda: f64,
    kind: Penalty,
) -> Result<LossValue> {
    if model.is_finalized() {
        return Err(Error::Finalize("joint loss applies only before finalization".into()));
    }
    if labels.is_empty() {
        return Err(TensorError::EmptyBatch { op: "loss_eq1" }.into());
    }
    model.zero_grad();
    let pass = model.forward_pass(x, Mode::Train, Mode::Train, true)?;
    let (ce, d_logits) = softmax_cross_entropy(&pass.logits, labels)?;
    model.backward(&pass, d_logits)?;
    let penalty = sparsity_penalty(model, lambda, kind, true)?;
    let cross_entropy = ce.to_f64();
    Ok(LossValue {
        total: cross_entropy + penalty,
        cross_entropy,
        penalty,
    })
}

/// Fraction of argmax-correct predictions of `forward` over `dataset`.
pub fn evaluate(mut forward: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = dataset.batch(chunk)?;
        let logits = forward(&x)?;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

pub fn argmax_rows<F: Real>(logits: &Tensor<F>) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy_single(graph: &BranchGraph, dataset: &Dataset) -> Result<f64> {
    evaluate(|x| forward_chain(graph, x, Mode::Eval), dataset)
}

pub fn accuracy_two_branch(model: &TwoBranchModel, dataset: &Dataset) -> Result<f64> {
    evaluate(|x| Ok(model.forward(x, Mode::Eval)?.logits), dataset)
}

/// Seeded per-epoch shuffling into mini-batches; the last partial batch is
/// kept.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    batch_size: usize,
}

impl Batches {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            batch_size,
        }
    }

    fn epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

fn check_loss(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, batch, loss })
    }
}

fn step(params: &mut [ParamRef<'_, f32>], opt: &mut OptimizerState<f32>, epoch: usize, batch: usize) -> Result<()> {
    sgd_step(params, opt).map_err(|e| match e {
        TensorError::NonFiniteGradient { .. } => Error::Diverged {
            epoch,
            batch,
            loss: f64::NAN,
        },
        e => e.into(),
    })
}

fn model_params<'a>(model: &'a mut TwoBranchModel) -> Vec<ParamRef<'a, f32>> {
    let mut p = model.ree.params_mut("ree");
    p.extend(model.tee.params_mut("tee"));
    p
}

/// Evaluation done after every transfer epoch.
pub struct TransferEval<'a> {
    pub test: &'a Dataset,
    /// Also evaluate each branch on its own.
    pub branches: bool,
}

/// Joint training of both branches under the sparsity objective.
/// `on_epoch` receives every epoch's metrics as soon as they exist.
pub fn train_transfer(
    model: &mut TwoBranchModel,
    train: &Dataset,
    eval: Option<&TransferEval<'_>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if model.is_finalized() {
        return Err(Error::Finalize("transfer applies only before finalization".into()));
    }
    let mut opt = cfg.optimizer();
    let mut batches = Batches::new(train.len(), cfg.batch_size, cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for (b, idx) in batches.epoch().iter().enumerate() {
            let (x, y) = train.batch(idx)?;
            let loss = loss_eq1(model, &x, &y, cfg.lambda_sparsity, cfg.penalty)?;
            check_loss(loss.total, epoch, b)?;
            loss_sum += loss.total * idx.len() as f64;
            step(&mut model_params(model), &mut opt, epoch, b)?;
        }
        opt.end_epoch();
        let mut m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            acc_two_branch: None,
            acc_ree: None,
            acc_tee: None,
        };
        if let Some(ev) = eval {
            m.acc_two_branch = Some(accuracy_two_branch(model, ev.test)?);
            if ev.branches {
                m.acc_ree = Some(accuracy_single(&model.ree, ev.test)?);
                m.acc_tee = Some(accuracy_single(&model.tee, ev.test)?);
            }
        }
        log::info!(
            "transfer epoch {epoch}: loss {:.4} acc {:?}",
            m.train_loss,
            m.acc_two_branch
        );
        on_epoch(&m)?;
        history.push(m);
    }
    model.zero_grad();
    Ok(history)
}

/// Plain cross-entropy training of one branch.
pub fn train_victim(
    graph: &mut BranchGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut opt = cfg.optimizer();
    let mut batches = Batches::new(train.len(), cfg.batch_size, cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for (b, idx) in batches.epoch().iter().enumerate() {
            let (x, y) = train.batch(idx)?;
            graph.zero_grad();
            let tape = run_chain(graph, &x, Mode::Train, true, |_, _| Ok(()))?;
            let (loss, d) = softmax_cross_entropy(tape.logits(), &y)?;
            check_loss(loss as f64, epoch, b)?;
            loss_sum += loss as f64 * idx.len() as f64;
            let mut seeds = vec![None; graph.layers.len()];
            *seeds.last_mut().expect("non-empty") = Some(d);
            backward_chain(graph, &tape, seeds, |_, _| Ok(()))?;
            commit_running_stats(graph, &tape);
            step(&mut graph.params_mut("w"), &mut opt, epoch, b)?;
        }
        opt.end_epoch();
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            acc_two_branch: None,
            acc_ree: test.map(|t| accuracy_single(graph, t)).transpose()?,
            acc_tee: None,
        };
        log::info!("train epoch {epoch}: loss {:.4} acc {:?}", m.train_loss, m.acc_ree);
        on_epoch(&m)?;
        history.push(m);
    }
    graph.zero_grad();
    Ok(history)
}

/// Cross-entropy training of M_T through the aligned merges with M_R frozen
/// in evaluation mode.
pub fn train_tee_only(
    model: &mut TwoBranchModel,
    train: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    model.ree.set_trainable(false);
    let mut opt = cfg.optimizer();
    let mut batches = Batches::new(train.len(), cfg.batch_size, cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let result = (|| {
        for epoch in 0..cfg.epochs {
            let mut loss_sum = 0.0;
            for (b, idx) in batches.epoch().iter().enumerate() {
                let (x, y) = train.batch(idx)?;
                model.tee.zero_grad();
                let pass = model.forward_pass(&x, Mode::Eval, Mode::Train, true)?;
                let (loss, d) = softmax_cross_entropy(&pass.logits, &y)?;
                check_loss(loss as f64, epoch, b)?;
                loss_sum += loss as f64 * idx.len() as f64;
                model.backward(&pass, d)?;
                step(&mut model.tee.params_mut("tee"), &mut opt, epoch, b)?;
            }
            opt.end_epoch();
            let m = EpochMetrics {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                acc_two_branch: None,
                acc_ree: None,
                acc_tee: None,
            };
            on_epoch(&m)?;
            history.push(m);
        }
        Ok(())
    })();
    model.ree.set_trainable(true);
    model.tee.zero_grad();
    result.map(|()| history)
}

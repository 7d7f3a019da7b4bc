//! Model-stealing evaluations against a finalized model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::read_ree;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::BranchGraph;
use crate::train::{accuracy_single, train_victim, TrainConfig};
use crate::twobranch::TwoBranchModel;

pub const DEFAULT_FRACTIONS: [f64; 6] = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];

/// Accuracy of the stolen M_R used as is. Only the REE file is read.
pub fn attack_direct_use(ree_file: &Path, test: &Dataset) -> Result<f64> {
    accuracy_single(&read_ree(ree_file)?.graph, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunePoint {
    pub fraction: f64,
    pub samples: usize,
    pub accuracy: f64,
}

/// Fine-tunes a fresh copy of the stolen M_R on a seeded subset of the
/// training data for every fraction. Fraction 1 uses the full set as is.
pub fn attack_finetune(
    ree_file: &Path,
    fractions: &[f64],
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<FinetunePoint>> {
    let stolen = read_ree(ree_file)?.graph;
    finetune_curve(&stolen, fractions, train, test, cfg)
}

pub fn finetune_curve(
    stolen: &BranchGraph,
    fractions: &[f64],
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<FinetunePoint>> {
    fractions
        .iter()
        .map(|&q| {
            let subset;
            let data = if q == 1.0 {
                train
            } else {
                subset = train.fraction(q, cfg.seed)?;
                &subset
            };
            let mut g = stolen.clone();
            g.set_trainable(true);
            train_victim(&mut g, data, None, cfg, |_| Ok(()))?;
            let accuracy = accuracy_single(&g, test)?;
            log::info!("fine-tune attack q={q}: {} samples, accuracy {accuracy:.4}", data.len());
            Ok(FinetunePoint {
                fraction: q,
                samples: data.len(),
                accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeeOnlyResult {
    pub best_accuracy: f64,
    pub epoch_accuracies: Vec<f64>,
}

/// Drops M_R entirely (every merge input becomes zero) and retrains M_T on
/// its own from its current weights; reports the best test accuracy seen.
pub fn tee_only_retrain(model: &TwoBranchModel, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TeeOnlyResult> {
    let mut tee = model.tee.clone();
    tee.set_trainable(true);
    let mut epoch_accuracies = vec![accuracy_single(&tee, test)?];
    train_victim(&mut tee, train, Some(test), cfg, |m| {
        epoch_accuracies.push(m.acc_ree.ok_or_else(|| Error::Data("missing evaluation".into()))?);
        Ok(())
    })?;
    let best_accuracy = epoch_accuracies.iter().copied().fold(0.0, f64::max);
    Ok(TeeOnlyResult {
        best_accuracy,
        epoch_accuracies,
    })
}

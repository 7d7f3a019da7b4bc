//! Rollback finalization and split export.

use std::path::Path;

use crate::container::{import_split, write_ree, write_tee, Meta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::prune::{ChannelMask, PruneCheckpoint};
use crate::train::{train_tee_only, EpochMetrics, TrainConfig};
use crate::twobranch::{AlignmentMap, TwoBranchModel};

/// A finalized model and the mask of the iteration its M_T came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Finalized {
    pub model: TwoBranchModel,
    pub mask: ChannelMask,
    /// Iteration of the checkpoint supplying M_T.
    pub iteration: usize,
}

/// M_T from the last checkpoint, M_R from the one before it, joined by
/// alignment maps selecting the channels that survived the last mask.
pub fn rollback_mr(history: &[PruneCheckpoint]) -> Result<Finalized> {
    let [.., prev, last] = history else {
        return Err(Error::Finalize(format!(
            "rollback needs at least one accepted pruning iteration; history holds {} checkpoint(s), run `prune` with a larger budget or more iterations",
            history.len()
        )));
    };
    let mask = last
        .mask
        .clone()
        .ok_or_else(|| Error::Finalize(format!("checkpoint {} has no mask", last.iteration)))?;
    let mut model = TwoBranchModel {
        ree: prev.model.ree.clone(),
        tee: last.model.tee.clone(),
        merge_points: last.model.merge_points.clone(),
        alignment: None,
    };
    if model.merge_points != prev.model.merge_points {
        return Err(Error::Finalize("checkpoints disagree on merge topology".into()));
    }
    model.alignment = Some(build_alignment_maps(&mask, &model)?);
    model.validate()?;
    Ok(Finalized {
        model,
        mask,
        iteration: last.iteration,
    })
}

/// For each merge point, the M_R channels M_T consumes: the kept positions
/// of the mask where the layer was prunable, the identity elsewhere.
pub fn build_alignment_maps(mask: &ChannelMask, model: &TwoBranchModel) -> Result<Vec<AlignmentMap>> {
    model
        .merge_points
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let cr = model.ree.layers[m.ree_layer].spec.channel_count().expect("merge layer");
            let ct = model.tee.layers[m.tee_layer].spec.channel_count().expect("merge layer");
            let map = match mask.layers.iter().find(|l| l.tee_layer == m.tee_layer) {
                Some(l) => {
                    if l.ree_layer != m.ree_layer || l.keep.len() != cr {
                        return Err(Error::Mask(format!(
                            "merge point {i}: mask covers {} channels, M_R holds {cr}",
                            l.keep.len()
                        )));
                    }
                    AlignmentMap(l.kept())
                }
                None => AlignmentMap::identity(cr),
            };
            if map.0.len() != ct {
                return Err(Error::Mask(format!(
                    "merge point {i}: mask keeps {} channels, M_T holds {ct}",
                    map.0.len()
                )));
            }
            map.check(cr).map_err(|detail| Error::Merge { merge_point: i, detail })?;
            Ok(map)
        })
        .collect()
}

/// Cross-entropy fine-tuning of M_T alone through the aligned merges.
pub fn posthoc_finetune(model: &mut TwoBranchModel, train: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    if !model.is_finalized() {
        return Err(Error::Finalize("post-hoc fine-tuning expects a finalized model".into()));
    }
    train_tee_only(model, train, cfg, |_| Ok(()))
}

/// Writes the REE file (M_R only) and the TEE file (M_T and alignment maps).
pub fn export_split(model: &TwoBranchModel, ree_path: &Path, tee_path: &Path, meta: Meta) -> Result<()> {
    write_ree(ree_path, model, meta.clone())?;
    write_tee(tee_path, model, meta)
}

pub fn import(ree_path: &Path, tee_path: &Path) -> Result<TwoBranchModel> {
    import_split(ree_path, tee_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Mode;
    use crate::graph::tiny_cnn;
    use crate::prune::apply_mask;
    use crate::twobranch::{init_twobranch, InitOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tbnet_tensor::Tensor;

    fn history() -> Vec<PruneCheckpoint> {
        let v = tiny_cnn([1, 8, 8], 3, [4, 4, 3, 2], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let m0 = init_twobranch(&v, 5, InitOptions::default()).unwrap();
        let mut mask = ChannelMask::all_ones(&m0).unwrap();
        mask.layers[0].keep = vec![true, false, true, false];
        mask.layers[2].keep = vec![false, true, true];
        let mut m1 = m0.clone();
        apply_mask(&mut m1, &mask).unwrap();
        vec![
            PruneCheckpoint {
                iteration: 0,
                model: m0,
                accuracy: 0.9,
                mask: None,
            },
            PruneCheckpoint {
                iteration: 1,
                model: m1,
                accuracy: 0.9,
                mask: Some(mask),
            },
        ]
    }

    #[test]
    fn minimal_rollback() {
        let h = history();
        let f = rollback_mr(&h).unwrap();
        assert_eq!(f.model.ree, h[0].model.ree);
        assert_eq!(f.model.tee, h[1].model.tee);
        let maps = f.model.alignment.as_ref().unwrap();
        assert_eq!(maps[0].0, vec![0, 2]);
        assert_eq!(maps[1].0, vec![0, 1, 2, 3]);
        assert_eq!(maps[2].0, vec![1, 2]);
        assert!(maps[4].is_identity());
        for (i, m) in f.model.merge_points.iter().enumerate() {
            let cr = f.model.ree.layers[m.ree_layer].spec.channel_count().unwrap();
            let ct = f.model.tee.layers[m.tee_layer].spec.channel_count().unwrap();
            let pruned = f.mask.layers.iter().find(|l| l.tee_layer == m.tee_layer).map_or(0, |l| {
                l.keep.iter().filter(|&&b| !b).count()
            });
            assert_eq!(cr, ct + pruned, "merge point {i}");
        }
        assert_ne!(f.model.ree.specs(), f.model.tee.specs());
        assert!(rollback_mr(&h[..1]).is_err());
    }

    #[test]
    fn split_round_trip() {
        let f = rollback_mr(&history()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (r, t) = (dir.path().join("m.ree.tbnt"), dir.path().join("m.tee.tbnt"));
        export_split(&f.model, &r, &t, Meta::new("export", "h")).unwrap();
        let back = import(&r, &t).unwrap();
        assert_eq!(back, f.model);
        let x = Tensor::from_fn(&[3, 1, 8, 8], |i| (i % 13) as f32 / 6.0 - 1.0);
        let a = f.model.forward(&x, Mode::Eval).unwrap().logits;
        let b = back.forward(&x, Mode::Eval).unwrap().logits;
        assert_eq!(a.data(), b.data());
    }
}

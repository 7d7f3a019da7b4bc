//! The paired REE/TEE model and its merged forward semantics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tbnet_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::exec::{backward_chain, commit_running_stats, forward_chain, run_chain, Mode, Tape};
use crate::graph::{BranchGraph, Layer, LayerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchRole {
    Ree,
    Tee,
}

/// Pairs the output of an M_R layer with the output of an M_T layer; the
/// M_R feature map is added into M_T's chain there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePoint {
    pub ree_layer: usize,
    pub tee_layer: usize,
}

/// A directed dataflow edge between branches, as written in model headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEdge {
    pub source: BranchRole,
    pub source_layer: usize,
    pub target: BranchRole,
    pub target_layer: usize,
}

impl From<MergePoint> for MergeEdge {
    fn from(m: MergePoint) -> Self {
        MergeEdge {
            source: BranchRole::Ree,
            source_layer: m.ree_layer,
            target: BranchRole::Tee,
            target_layer: m.tee_layer,
        }
    }
}

impl TryFrom<MergeEdge> for MergePoint {
    type Error = Error;

    fn try_from(e: MergeEdge) -> Result<Self> {
        match (e.source, e.target) {
            (BranchRole::Ree, BranchRole::Tee) => Ok(MergePoint {
                ree_layer: e.source_layer,
                tee_layer: e.target_layer,
            }),
            (s, t) => Err(Error::Graph(format!(
                "merge edge {s:?}:{} -> {t:?}:{} is not REE -> TEE",
                e.source_layer, e.target_layer
            ))),
        }
    }
}

/// For one merge point: the M_R channel index gathered for each M_T channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMap(pub Vec<usize>);

impl AlignmentMap {
    pub fn identity(channels: usize) -> Self {
        AlignmentMap((0..channels).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &c)| i == c)
    }

    /// Injective and every index below `range`.
    pub fn check(&self, range: usize) -> std::result::Result<(), String> {
        let mut seen = vec![false; range];
        for &i in &self.0 {
            if i >= range {
                return Err(format!("index {i} outside {range} channels"));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(format!("index {i} appears twice"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitOptions {
    /// Also merge M_R's logits into M_T's classifier output.
    pub merge_logits: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self { merge_logits: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoBranchModel<F: Real = f32> {
    pub ree: BranchGraph<F>,
    pub tee: BranchGraph<F>,
    pub merge_points: Vec<MergePoint>,
    /// One map per merge point; present only after finalization.
    pub alignment: Option<Vec<AlignmentMap>>,
}

/// Result of a merged forward pass.
#[derive(Debug, Clone)]
pub struct TwoBranchOutput<F: Real> {
    pub logits: Tensor<F>,
    /// M_R's output at every merge point, in merge order.
    pub ree_trace: Vec<Tensor<F>>,
}

/// A recorded merged forward pass, consumed by [`TwoBranchModel::backward`].
pub struct TwoBranchPass<F: Real> {
    pub logits: Tensor<F>,
    ree_tape: Tape<F>,
    tee_tape: Tape<F>,
    ree_mode: Mode,
    tee_mode: Mode,
}

/// Merge points after every paired conv block and, optionally, at the logits.
pub fn pair_merge_points<F: Real>(ree: &BranchGraph<F>, tee: &BranchGraph<F>, merge_logits: bool) -> Result<Vec<MergePoint>> {
    let (rc, tc) = (ree.conv_layers(), tee.conv_layers());
    if rc.len() != tc.len() {
        return Err(Error::Pairing(format!(
            "M_R has {} conv blocks, M_T has {}",
            rc.len(),
            tc.len()
        )));
    }
    let mut points: Vec<MergePoint> = rc
        .into_iter()
        .zip(tc)
        .map(|(ree_layer, tee_layer)| MergePoint { ree_layer, tee_layer })
        .collect();
    if merge_logits {
        points.push(MergePoint {
            ree_layer: ree.dense_layer(),
            tee_layer: tee.dense_layer(),
        });
    }
    Ok(points)
}

/// Builds the two-branch model: M_R is the victim (without residual adds),
/// M_T the victim's architecture with freshly seeded weights.
pub fn init_twobranch(victim: &BranchGraph, seed: u64, options: InitOptions) -> Result<TwoBranchModel> {
    victim.validate()?;
    let ree = victim.without_residuals();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tee = BranchGraph {
        input_shape: victim.input_shape,
        classes: victim.classes,
        layers: victim
            .layers
            .iter()
            .map(|l| Layer {
                spec: l.spec,
                params: LayerParams::init(&l.spec, &mut rng),
            })
            .collect(),
    };
    let merge_points = pair_merge_points(&ree, &tee, options.merge_logits)?;
    let model = TwoBranchModel {
        ree,
        tee,
        merge_points,
        alignment: None,
    };
    model.validate()?;
    Ok(model)
}

impl<F: Real> TwoBranchModel<F> {
    pub fn is_finalized(&self) -> bool {
        self.alignment.is_some()
    }

    pub fn merges_logits(&self) -> bool {
        self.merge_points
            .last()
            .is_some_and(|m| self.tee.layers[m.tee_layer].spec.is_dense())
    }

    /// `(ree_layer, tee_layer)` of every conv merge point.
    pub fn paired_convs(&self) -> Vec<MergePoint> {
        self.merge_points
            .iter()
            .copied()
            .filter(|m| self.tee.layers[m.tee_layer].spec.is_conv())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.ree.validate()?;
        self.tee.validate()?;
        if self.ree.input_shape != self.tee.input_shape || self.ree.classes != self.tee.classes {
            return Err(Error::Pairing("branches disagree on input shape or classes".into()));
        }
        let mut last: Option<MergePoint> = None;
        for (i, m) in self.merge_points.iter().enumerate() {
            let (Some(r), Some(t)) = (self.ree.layers.get(m.ree_layer), self.tee.layers.get(m.tee_layer)) else {
                return Err(Error::Merge {
                    merge_point: i,
                    detail: "layer index out of range".into(),
                });
            };
            let same_kind = (r.spec.is_conv() && t.spec.is_conv()) || (r.spec.is_dense() && t.spec.is_dense());
            if !same_kind {
                return Err(Error::Merge {
                    merge_point: i,
                    detail: "merge must pair conv with conv or dense with dense".into(),
                });
            }
            if let Some(prev) = last {
                if m.ree_layer <= prev.ree_layer || m.tee_layer <= prev.tee_layer {
                    return Err(Error::Merge {
                        merge_point: i,
                        detail: "merge points out of order".into(),
                    });
                }
            }
            last = Some(*m);
            let (cr, ct) = (r.spec.channel_count().unwrap(), t.spec.channel_count().unwrap());
            match &self.alignment {
                None if cr != ct => {
                    return Err(Error::Merge {
                        merge_point: i,
                        detail: format!("unfinalized branches have {cr} vs {ct} channels"),
                    })
                }
                None => {}
                Some(maps) => {
                    let map = maps.get(i).ok_or(Error::Merge {
                        merge_point: i,
                        detail: "missing alignment map".into(),
                    })?;
                    if map.0.len() != ct {
                        return Err(Error::Merge {
                            merge_point: i,
                            detail: format!("alignment lists {} channels, M_T has {ct}", map.0.len()),
                        });
                    }
                    map.check(cr).map_err(|detail| Error::Merge { merge_point: i, detail })?;
                }
            }
        }
        if let Some(maps) = &self.alignment {
            if maps.len() != self.merge_points.len() {
                return Err(Error::Graph("one alignment map per merge point required".into()));
            }
        }
        Ok(())
    }

    pub fn forward_pass(&self, x: &Tensor<F>, ree_mode: Mode, tee_mode: Mode, record: bool) -> Result<TwoBranchPass<F>> {
        let ree_tape = run_chain(&self.ree, x, ree_mode, record, |_, _| Ok(()))?;
        let mut next = 0;
        let tee_tape = run_chain(&self.tee, x, tee_mode, record, |idx, out| {
            let Some(m) = self.merge_points.get(next) else {
                return Ok(());
            };
            if m.tee_layer != idx {
                return Ok(());
            }
            let map = self.alignment.as_ref().map(|maps| &maps[next]);
            merge_add(map, next, out, &ree_tape.outputs[m.ree_layer])?;
            next += 1;
            Ok(())
        })?;
        Ok(TwoBranchPass {
            logits: tee_tape.logits().clone(),
            ree_tape,
            tee_tape,
            ree_mode,
            tee_mode,
        })
    }

    /// Merged forward without recording; both branches in `mode`.
    pub fn forward(&self, x: &Tensor<F>, mode: Mode) -> Result<TwoBranchOutput<F>> {
        let pass = self.forward_pass(x, mode, mode, false)?;
        let ree_trace = self
            .merge_points
            .iter()
            .map(|m| pass.ree_tape.outputs[m.ree_layer].clone())
            .collect();
        Ok(TwoBranchOutput {
            logits: pass.logits,
            ree_trace,
        })
    }

    /// Back-propagates `d_logits` through both branches (M_R only when it is
    /// trainable) and commits train-mode BN statistics.
    pub fn backward(&mut self, pass: &TwoBranchPass<F>, d_logits: Tensor<F>) -> Result<()> {
        let TwoBranchModel {
            ree,
            tee,
            merge_points,
            alignment,
        } = self;
        let mut tee_seeds = vec![None; tee.layers.len()];
        *tee_seeds.last_mut().expect("non-empty") = Some(d_logits);
        let mut ree_grads: Vec<Option<Tensor<F>>> = vec![None; merge_points.len()];
        let train_ree = ree.is_trainable();
        backward_chain(tee, &pass.tee_tape, tee_seeds, |idx, g| {
            if !train_ree {
                return Ok(());
            }
            if let Some(i) = merge_points.iter().position(|m| m.tee_layer == idx) {
                let shape = pass.ree_tape.outputs[merge_points[i].ree_layer].shape();
                let map = alignment.as_ref().map(|maps| &maps[i]);
                ree_grads[i] = Some(scatter(map, i, g, shape)?);
            }
            Ok(())
        })?;
        if train_ree {
            let mut seeds = vec![None; ree.layers.len()];
            for (m, g) in merge_points.iter().zip(ree_grads) {
                seeds[m.ree_layer] = g;
            }
            backward_chain(ree, &pass.ree_tape, seeds, |_, _| Ok(()))?;
        }
        if pass.tee_mode == Mode::Train {
            commit_running_stats(tee, &pass.tee_tape);
        }
        if pass.ree_mode == Mode::Train && train_ree {
            commit_running_stats(ree, &pass.ree_tape);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.ree.zero_grad();
        self.tee.zero_grad();
    }

    pub fn cast<G: Real>(&self) -> TwoBranchModel<G> {
        TwoBranchModel {
            ree: self.ree.cast(),
            tee: self.tee.cast(),
            merge_points: self.merge_points.clone(),
            alignment: self.alignment.clone(),
        }
    }

    /// Total conv channels per branch.
    pub fn channel_totals(&self) -> (usize, usize) {
        let count = |g: &BranchGraph<F>| -> usize {
            g.conv_layers()
                .iter()
                .map(|&i| g.layers[i].spec.channel_count().unwrap())
                .sum()
        };
        (count(&self.ree), count(&self.tee))
    }
}

/// `t += select(r)` at merge point `i`: gathers the aligned M_R channels
/// (all of them without a map) and adds them into M_T's activation.
pub fn merge_add<F: Real>(alignment: Option<&AlignmentMap>, i: usize, t: &mut Tensor<F>, r: &Tensor<F>) -> Result<()> {
    let gathered;
    let sel = match alignment {
        Some(map) if !map.is_identity() || map.0.len() != r.dim(1) => {
            gathered = r.select_channels(&map.0).map_err(|e| Error::Merge {
                merge_point: i,
                detail: e.to_string(),
            })?;
            &gathered
        }
        _ => r,
    };
    if sel.shape() != t.shape() {
        return Err(Error::Merge {
            merge_point: i,
            detail: format!("M_R supplies {:?}, M_T produces {:?}", sel.shape(), t.shape()),
        });
    }
    for (a, b) in t.data_mut().iter_mut().zip(sel.data()) {
        *a += *b;
    }
    Ok(())
}

/// Adjoint of channel selection: scatters a gradient back to M_R width.
fn scatter<F: Real>(alignment: Option<&AlignmentMap>, i: usize, g: &Tensor<F>, ree_shape: &[usize]) -> Result<Tensor<F>> {
    if g.shape() == ree_shape {
        return Ok(g.clone());
    }
    let map = &alignment
        .ok_or(Error::Merge {
            merge_point: i,
            detail: "width mismatch without alignment".into(),
        })?
        .0;
    let n = g.dim(0);
    let (ct, cr) = (g.dim(1), ree_shape[1]);
    let inner: usize = g.shape()[2..].iter().product();
    let mut out = Tensor::zeros(ree_shape);
    let dst = out.data_mut();
    for s in 0..n {
        for (c, &rc) in map.iter().enumerate() {
            let src = &g.data()[(s * ct + c) * inner..][..inner];
            let d = &mut dst[(s * cr + rc) * inner..][..inner];
            for (a, b) in d.iter_mut().zip(src) {
                *a += *b;
            }
        }
    }
    Ok(out)
}

pub fn forward_twobranch<F: Real>(model: &TwoBranchModel<F>, x: &Tensor<F>, mode: Mode) -> Result<TwoBranchOutput<F>> {
    model.forward(x, mode)
}

/// Stand-alone forward of one branch.
pub fn forward_single<F: Real>(branch: &BranchGraph<F>, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
    forward_chain(branch, x, mode)
}

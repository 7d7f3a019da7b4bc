//! Split inference across an REE and a TEE context.
//!
//! Each context runs on its own thread and owns only what its file holds.
//! The REE context gets a sender to the harness; the harness relays every
//! message to the TEE context and records it in the audit log. The TEE
//! context gets the receiving end of that relay and a user-output sender,
//! and nothing with which it could reach the REE context.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;

use serde::{Deserialize, Serialize};
use tbnet_tensor::Tensor;

use crate::container::{peek, read_ree, read_tee, read_victim, ContainerKind};
use crate::error::{io_err, Error, Result};
use crate::exec::{run_chain, Mode};
use crate::graph::BranchGraph;
use crate::resources::count_resources;
use crate::train::argmax_rows;
use crate::twobranch::{merge_add, AlignmentMap, MergePoint};

/// Sequence number, merge-point id and four u32 dimensions, little-endian.
pub const HEADER_BYTES: usize = 24;

/// One feature map or logit tensor travelling REE -> TEE.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub seq: u32,
    pub merge_point: u32,
    pub payload: Tensor<f32>,
}

impl Message {
    pub fn byte_size(&self) -> usize {
        HEADER_BYTES + 4 * self.payload.len()
    }

    /// Wire encoding; payloads of rank below four are padded with unit
    /// dimensions.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let shape = self.payload.shape();
        if shape.len() > 4 {
            return Err(Error::Data(format!("payload rank {} exceeds 4", shape.len())));
        }
        let mut out = Vec::with_capacity(self.byte_size());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.merge_point.to_le_bytes());
        for d in 0..4 {
            let v = if d < shape.len() { shape[d] as u32 } else { 0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.payload.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Protocol {
            merge_point: usize::MAX,
            detail,
        };
        if bytes.len() < HEADER_BYTES {
            return Err(bad(format!("{}-byte message is shorter than its header", bytes.len())));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]]);
        let shape: Vec<usize> = (2..6).map(|i| word(i) as usize).take_while(|&d| d > 0).collect();
        let n: usize = shape.iter().product();
        if bytes.len() != HEADER_BYTES + 4 * n {
            return Err(bad(format!("shape {shape:?} needs {} payload bytes, got {}", 4 * n, bytes.len() - HEADER_BYTES)));
        }
        let data = bytes[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Message {
            seq: word(0),
            merge_point: word(1),
            payload: Tensor::new(&shape, data)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ReeToTee,
    TeeToRee,
    TeeToUser,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub ordinal: u64,
    pub direction: Direction,
    pub merge_point: Option<u32>,
    pub bytes: usize,
    /// Whether the record carried a feature-map or logit tensor.
    pub tensor: bool,
}

/// Append-only traffic record of one or more inferences.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLog {
    pub records: Vec<AuditRecord>,
    /// Merge messages each inference must contain.
    pub merge_points: usize,
    pub inferences: usize,
}

impl AuditLog {
    pub fn push(&mut self, direction: Direction, merge_point: Option<u32>, bytes: usize, tensor: bool) {
        self.records.push(AuditRecord {
            ordinal: self.records.len() as u64,
            direction,
            merge_point,
            bytes,
            tensor,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn message_bytes(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.direction == Direction::ReeToTee)
            .map(|r| r.bytes)
            .sum()
    }

    /// One JSON object per line.
    pub fn to_lines(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_lines()?).map_err(io_err(path))
    }

    fn append(&mut self, other: AuditLog) {
        for r in other.records {
            self.push(r.direction, r.merge_point, r.bytes, r.tensor);
        }
        self.inferences += other.inferences;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub ordinal: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub pass: bool,
    pub violations: Vec<Violation>,
}

/// Fails on any tensor-bearing TEE -> REE record, on a user-output count
/// other than one per inference, and on missing merge traffic.
pub fn audit_check(log: &AuditLog) -> AuditVerdict {
    let mut violations = Vec::new();
    for r in &log.records {
        if r.direction == Direction::TeeToRee && r.tensor {
            violations.push(Violation {
                ordinal: Some(r.ordinal),
                detail: format!("TEE sent a {}-byte tensor to the REE", r.bytes),
            });
        }
    }
    let outputs: Vec<&AuditRecord> = log.records.iter().filter(|r| r.direction == Direction::TeeToUser).collect();
    if outputs.len() != log.inferences {
        violations.push(Violation {
            ordinal: outputs.get(log.inferences).map(|r| r.ordinal),
            detail: format!("{} user outputs for {} inference(s)", outputs.len(), log.inferences),
        });
    }
    let merges = log.records.iter().filter(|r| r.direction == Direction::ReeToTee).count();
    if merges != log.merge_points * log.inferences {
        violations.push(Violation {
            ordinal: None,
            detail: format!(
                "{merges} merge messages, expected {} per inference over {} inference(s)",
                log.merge_points, log.inferences
            ),
        });
    }
    AuditVerdict {
        pass: violations.is_empty(),
        violations,
    }
}

/// Inventory of what a context holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextInventory {
    pub layers: usize,
    pub param_count: usize,
    pub alignment_maps: usize,
}

/// Holds M_R only.
#[derive(Debug, Clone)]
pub struct ReeContext {
    graph: BranchGraph,
    export_layers: Vec<usize>,
}

impl ReeContext {
    /// Loads an REE file; any other kind of file is refused.
    pub fn load(path: &Path) -> Result<Self> {
        let kind = peek(path)?.kind;
        if kind != ContainerKind::Ree {
            return Err(Error::Refused(format!(
                "the REE context only loads REE files; {} holds a {kind:?} model",
                path.display()
            )));
        }
        let a = read_ree(path)?;
        Ok(Self {
            graph: a.graph,
            export_layers: a.export_layers,
        })
    }

    pub fn inventory(&self) -> Result<ContextInventory> {
        Ok(ContextInventory {
            layers: self.graph.layers.len(),
            param_count: count_resources(&self.graph)?.param_count,
            alignment_maps: 0,
        })
    }

    fn run(&self, x: &Tensor<f32>, out: &Sender<Vec<u8>>) -> Result<()> {
        let mut seq = 0u32;
        run_chain(&self.graph, x, Mode::Eval, false, |idx, act| {
            if let Some(i) = self.export_layers.iter().position(|&l| l == idx) {
                let msg = Message {
                    seq,
                    merge_point: i as u32,
                    payload: act.clone(),
                };
                seq += 1;
                out.send(msg.encode()?).map_err(|_| Error::Protocol {
                    merge_point: i,
                    detail: "channel to the TEE closed".into(),
                })?;
            }
            Ok(())
        })?;
        Ok(())
    }
}

/// Holds M_T, the merge topology and the alignment maps.
#[derive(Debug, Clone)]
pub struct TeeContext {
    graph: BranchGraph,
    merge_points: Vec<MergePoint>,
    alignment: Vec<AlignmentMap>,
}

/// What leaves the TEE through the user-output port.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Tensor<f32>,
    pub classes: Vec<usize>,
}

impl TeeContext {
    pub fn load(path: &Path) -> Result<Self> {
        let a = read_tee(path)?;
        Ok(Self {
            graph: a.graph,
            merge_points: a.merge_points,
            alignment: a.alignment,
        })
    }

    pub fn inventory(&self) -> Result<ContextInventory> {
        Ok(ContextInventory {
            layers: self.graph.layers.len(),
            param_count: count_resources(&self.graph)?.param_count,
            alignment_maps: self.alignment.len(),
        })
    }

    fn run(&self, x: &Tensor<f32>, inbox: Receiver<Vec<u8>>, user: Sender<Prediction>) -> Result<()> {
        let mut next = 0usize;
        let tape = run_chain(&self.graph, x, Mode::Eval, false, |idx, act| {
            let Some(m) = self.merge_points.get(next) else {
                return Ok(());
            };
            if m.tee_layer != idx {
                return Ok(());
            }
            let proto = |detail: String| Error::Protocol { merge_point: next, detail };
            let bytes = inbox.recv().map_err(|_| proto("message missing".into()))?;
            let msg = Message::decode(&bytes).map_err(|e| proto(e.to_string()))?;
            if msg.seq as usize != next || msg.merge_point as usize != next {
                return Err(proto(format!(
                    "received message {} for merge point {} out of order",
                    msg.seq, msg.merge_point
                )));
            }
            merge_add(Some(&self.alignment[next]), next, act, &msg.payload).map_err(|e| proto(e.to_string()))?;
            next += 1;
            Ok(())
        })?;
        if inbox.recv().is_ok() {
            return Err(Error::Protocol {
                merge_point: next,
                detail: "unexpected extra message".into(),
            });
        }
        let logits = tape.outputs.into_iter().next_back().expect("non-empty graph");
        let classes = argmax_rows(&logits);
        user.send(Prediction { logits, classes }).map_err(|_| Error::Protocol {
            merge_point: next,
            detail: "user-output port closed".into(),
        })
    }
}

/// How the harness forwards REE messages; anything but `Faithful` exists to
/// exercise the protocol checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relay {
    Faithful,
    /// Drop the message at this merge point.
    Drop(usize),
    /// Swap the messages at this merge point and the next.
    Swap(usize),
}

pub struct SplitRuntime {
    ree: ReeContext,
    tee: TeeContext,
    pub ree_path: PathBuf,
    pub tee_path: PathBuf,
    log: AuditLog,
    baseline: Option<BranchGraph>,
}

pub fn deploy(ree_file: &Path, tee_file: &Path) -> Result<SplitRuntime> {
    let ree = ReeContext::load(ree_file)?;
    let tee = TeeContext::load(tee_file)?;
    if ree.export_layers != tee.merge_points.iter().map(|m| m.ree_layer).collect::<Vec<_>>() {
        return Err(Error::Pairing("REE and TEE files disagree on merge points".into()));
    }
    let log = AuditLog {
        merge_points: tee.merge_points.len(),
        ..AuditLog::default()
    };
    Ok(SplitRuntime {
        ree,
        tee,
        ree_path: ree_file.to_path_buf(),
        tee_path: tee_file.to_path_buf(),
        log,
        baseline: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitInference {
    pub prediction: Prediction,
    pub log: AuditLog,
    /// Present once a baseline victim is attached.
    pub resources: Option<ResourceReport>,
}

impl SplitRuntime {
    pub fn ree(&self) -> &ReeContext {
        &self.ree
    }

    pub fn tee(&self) -> &TeeContext {
        &self.tee
    }

    /// Loads the victim that resource reports compare against.
    pub fn attach_baseline(&mut self, victim_file: &Path) -> Result<()> {
        self.baseline = Some(read_victim(victim_file)?.0);
        Ok(())
    }

    /// Cumulative audit log of every inference so far.
    pub fn audit_log(&self) -> &AuditLog {
        &self.log
    }

    pub fn teardown(self) -> AuditLog {
        self.log
    }

    pub fn infer(&mut self, x: &Tensor<f32>) -> Result<SplitInference> {
        self.infer_with(x, Relay::Faithful)
    }

    pub fn infer_with(&mut self, x: &Tensor<f32>, relay: Relay) -> Result<SplitInference> {
        let mut log = AuditLog {
            merge_points: self.log.merge_points,
            inferences: 1,
            ..AuditLog::default()
        };
        let (ree_tx, harness_rx) = channel::<Vec<u8>>();
        let (harness_tx, tee_rx) = channel::<Vec<u8>>();
        let (user_tx, user_rx) = channel::<Prediction>();
        let (ree, tee) = (&self.ree, &self.tee);
        let (ree_res, tee_res, prediction) = thread::scope(|s| {
            let ree_h = s.spawn(move || ree.run(x, &ree_tx));
            let tee_h = s.spawn(move || tee.run(x, tee_rx, user_tx));
            let mut held: Option<Vec<u8>> = None;
            for (i, bytes) in harness_rx.iter().enumerate() {
                let merge = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
                log.push(Direction::ReeToTee, Some(merge), bytes.len(), true);
                match relay {
                    Relay::Drop(k) if k == i => continue,
                    Relay::Swap(k) if k == i => {
                        held = Some(bytes);
                        continue;
                    }
                    _ => {}
                }
                let _ = harness_tx.send(bytes);
                if let Some(h) = held.take() {
                    let _ = harness_tx.send(h);
                }
            }
            if let Some(h) = held.take() {
                let _ = harness_tx.send(h);
            }
            drop(harness_tx);
            let prediction = user_rx.recv().ok();
            if let Some(p) = &prediction {
                log.push(Direction::TeeToUser, None, 4 * p.logits.len() + 4 * p.classes.len(), false);
            }
            (ree_h.join().expect("REE thread"), tee_h.join().expect("TEE thread"), prediction)
        });
        ree_res?;
        tee_res?;
        let prediction = prediction.ok_or_else(|| Error::Protocol {
            merge_point: self.tee.merge_points.len(),
            detail: "no user output".into(),
        })?;
        self.log.append(log.clone());
        let resources = match &self.baseline {
            Some(v) => Some(report_for(&self.ree.graph, &self.tee.graph, v, self.message_bytes_per_sample()?.iter().sum())?),
            None => None,
        };
        Ok(SplitInference {
            prediction,
            log,
            resources,
        })
    }

    /// Message bytes of one single-sample inference, derived from shapes.
    pub fn message_bytes_per_sample(&self) -> Result<Vec<usize>> {
        let shapes = self.ree.graph.shapes()?;
        Ok(self
            .ree
            .export_layers
            .iter()
            .map(|&l| HEADER_BYTES + 4 * shapes[l].elements())
            .collect())
    }
}

pub fn infer_split(runtime: &mut SplitRuntime, x: &Tensor<f32>) -> Result<SplitInference> {
    runtime.infer(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub tee_param_bytes: usize,
    pub ree_param_bytes: usize,
    pub tee_macs: u64,
    pub ree_macs: u64,
    /// REE -> TEE bytes of one single-sample inference.
    pub message_bytes_per_inference: usize,
    pub baseline_tee_param_bytes: usize,
    pub baseline_macs: u64,
    pub memory_reduction_ratio: f64,
    pub mac_reduction_ratio: f64,
}

/// Secure-side cost of the deployment against running the victim wholly in
/// the TEE.
pub fn resource_report(runtime: &SplitRuntime, victim_file: &Path) -> Result<ResourceReport> {
    let (victim, _) = read_victim(victim_file)?;
    report_for(&runtime.ree.graph, &runtime.tee.graph, &victim, runtime.message_bytes_per_sample()?.iter().sum())
}

pub fn report_for(ree: &BranchGraph, tee: &BranchGraph, victim: &BranchGraph, message_bytes: usize) -> Result<ResourceReport> {
    let (r, t, v) = (count_resources(ree)?, count_resources(tee)?, count_resources(victim)?);
    Ok(ResourceReport {
        tee_param_bytes: t.param_bytes,
        ree_param_bytes: r.param_bytes,
        tee_macs: t.macs,
        ree_macs: r.macs,
        message_bytes_per_inference: message_bytes,
        baseline_tee_param_bytes: v.param_bytes,
        baseline_macs: v.macs,
        memory_reduction_ratio: v.param_bytes as f64 / t.param_bytes as f64,
        mac_reduction_ratio: v.macs as f64 / t.macs as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_round_trip_and_size() {
        let m = Message {
            seq: 3,
            merge_point: 2,
            payload: Tensor::from_fn(&[2, 3, 4, 5], |i| i as f32 * 0.5),
        };
        let bytes = m.encode().unwrap();
        assert_eq!(bytes.len(), m.byte_size());
        assert_eq!(bytes.len(), 24 + 4 * 120);
        assert_eq!(Message::decode(&bytes).unwrap(), m);
        let flat = Message {
            seq: 0,
            merge_point: 4,
            payload: Tensor::from_fn(&[1, 10], |i| i as f32),
        };
        assert_eq!(Message::decode(&flat.encode().unwrap()).unwrap(), flat);
        assert!(Message::decode(&bytes[..30]).is_err());
    }

    #[test]
    fn audit_rules() {
        let mut log = AuditLog {
            merge_points: 2,
            inferences: 1,
            ..Default::default()
        };
        log.push(Direction::ReeToTee, Some(0), 100, true);
        log.push(Direction::ReeToTee, Some(1), 64, true);
        log.push(Direction::TeeToUser, None, 44, false);
        assert!(audit_check(&log).pass);
        let mut leak = log.clone();
        leak.push(Direction::TeeToRee, Some(0), 100, true);
        let v = audit_check(&leak);
        assert!(!v.pass);
        assert_eq!(v.violations[0].ordinal, Some(3));
        let mut twice = log.clone();
        twice.push(Direction::TeeToUser, None, 44, false);
        assert!(!audit_check(&twice).pass);
        let silent = AuditLog {
            records: vec![log.records[2].clone()],
            ..log.clone()
        };
        assert!(!audit_check(&silent).pass);
        assert!(audit_check(&AuditLog::default()).pass);
    }
}

//! The TBNT model container.
//!
//! Layout: `b"TBNT"`, format version (u32 LE), header length (u32 LE), a
//! UTF-8 JSON header, then every stored real as f32 LE. Reals are written
//! branch by branch, layer by layer, in each layer's serialization order
//! (conv: weight, bias, gamma, beta, running mean, running var; dense:
//! weight, bias). Alignment maps are written only by [`write_tee`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{io_err, Error, Result};
use crate::graph::{BranchGraph, Layer, LayerParams, LayerSpec};
use crate::twobranch::{AlignmentMap, BranchRole, MergeEdge, MergePoint, TwoBranchModel};

pub const MAGIC: &[u8; 4] = b"TBNT";
pub const FORMAT_VERSION: u32 = 1;
/// Bytes before the JSON header.
pub const PREAMBLE_BYTES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    /// A single trained branch.
    Victim,
    /// Both branches of an unfinalized model.
    TwoBranch,
    /// A pruning-iteration snapshot of an unfinalized model.
    Checkpoint,
    /// M_R of a finalized model.
    Ree,
    /// M_T of a finalized model with its alignment maps.
    Tee,
}

/// Provenance carried by every file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub stage: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Meta {
    pub fn new(stage: &str, config_hash: &str) -> Self {
        Self {
            stage: stage.into(),
            config_hash: config_hash.into(),
            extra: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra
            .insert(key.into(), serde_json::to_value(value).expect("serializable meta"));
        self
    }

    pub fn get<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .extra
            .get(key)
            .ok_or_else(|| Error::Data(format!("metadata has no `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchHeader {
    pub name: String,
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Reals stored for this branch.
    pub reals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ContainerKind,
    pub meta: Meta,
    pub branches: Vec<BranchHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_edges: Option<Vec<MergeEdge>>,
    /// M_R layers whose outputs leave the REE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export_layers: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_maps: Option<Vec<AlignmentMap>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub branches: Vec<BranchGraph>,
}

fn branch_header(name: &str, g: &BranchGraph) -> BranchHeader {
    BranchHeader {
        name: name.into(),
        input_shape: g.input_shape,
        classes: g.classes,
        layers: g.specs(),
        reals: g.layers.iter().flat_map(|l| l.params.tensors()).map(<[f32]>::len).sum(),
    }
}

impl Container {
    fn new(kind: ContainerKind, meta: Meta, named: &[(&str, &BranchGraph)]) -> Self {
        Self {
            header: Header {
                kind,
                meta,
                branches: named.iter().map(|(n, g)| branch_header(n, g)).collect(),
                merge_edges: None,
                export_layers: None,
                alignment_maps: None,
            },
            branches: named.iter().map(|(_, g)| (*g).clone()).collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let reals: usize = self.header.branches.iter().map(|b| b.reals).sum();
        let mut out = Vec::with_capacity(PREAMBLE_BYTES + header.len() + 4 * reals);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let len = u32::try_from(header.len()).map_err(|_| Error::Data("header too large".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        for g in &self.branches {
            for l in &g.layers {
                for t in l.params.tensors() {
                    for v in t {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let ferr = |offset: usize, detail: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail,
        };
        let header = read_header(bytes, path)?;
        let mut pos = PREAMBLE_BYTES + header_len(bytes);
        let mut branches = Vec::with_capacity(header.branches.len());
        for bh in &header.branches {
            let mut layers: Vec<Layer> = bh
                .layers
                .iter()
                .map(|spec| Layer {
                    spec: *spec,
                    params: LayerParams::zeros(spec),
                })
                .collect();
            let mut count = 0;
            for l in &mut layers {
                for t in l.params.tensors_mut() {
                    let need = 4 * t.len();
                    let src = bytes
                        .get(pos..pos + need)
                        .ok_or_else(|| ferr(bytes.len(), format!("weights of branch `{}` truncated", bh.name)))?;
                    for (v, b) in t.iter_mut().zip(src.chunks_exact(4)) {
                        *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                    }
                    pos += need;
                    count += t.len();
                }
            }
            if count != bh.reals {
                return Err(ferr(pos, format!("branch `{}` declares {} reals, layers hold {count}", bh.name, bh.reals)));
            }
            let g = BranchGraph {
                input_shape: bh.input_shape,
                classes: bh.classes,
                layers,
            };
            g.validate().map_err(|e| ferr(PREAMBLE_BYTES, format!("branch `{}`: {e}", bh.name)))?;
            branches.push(g);
        }
        if pos != bytes.len() {
            return Err(ferr(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { header, branches })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes, path)
    }

    fn expect(self, kind: ContainerKind, path: &Path) -> Result<Self> {
        if self.header.kind != kind {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: PREAMBLE_BYTES as u64,
                detail: format!("file holds a {:?} model, expected {kind:?}", self.header.kind),
            });
        }
        Ok(self)
    }

    /// Byte length of the weight payload.
    pub fn weight_bytes(&self) -> usize {
        4 * self.header.branches.iter().map(|b| b.reals).sum::<usize>()
    }
}

fn header_len(bytes: &[u8]) -> usize {
    u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize
}

/// Parses only the preamble and JSON header.
pub fn read_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let ferr = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < PREAMBLE_BYTES {
        return Err(ferr(bytes.len(), "truncated preamble".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(ferr(0, "not a TBNT file".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != FORMAT_VERSION {
        return Err(ferr(4, format!("unsupported format version {version}")));
    }
    let len = header_len(bytes);
    let raw = bytes
        .get(PREAMBLE_BYTES..PREAMBLE_BYTES + len)
        .ok_or_else(|| ferr(bytes.len(), format!("header of {len} bytes truncated")))?;
    let text = std::str::from_utf8(raw).map_err(|e| ferr(PREAMBLE_BYTES + e.valid_up_to(), "header is not UTF-8".into()))?;
    serde_json::from_str(text).map_err(|e| ferr(PREAMBLE_BYTES, format!("bad header: {e}")))
}

/// Reads the header of a file without loading weights.
pub fn peek(path: &Path) -> Result<Header> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    read_header(&bytes, path)
}

pub fn write_victim(path: &Path, graph: &BranchGraph, meta: Meta) -> Result<()> {
    Container::new(ContainerKind::Victim, meta, &[("victim", graph)]).write(path)
}

pub fn read_victim(path: &Path) -> Result<(BranchGraph, Meta)> {
    let mut c = Container::read(path)?.expect(ContainerKind::Victim, path)?;
    Ok((c.branches.remove(0), c.header.meta))
}

fn two_branch_container(kind: ContainerKind, model: &TwoBranchModel, meta: Meta) -> Result<Container> {
    if model.is_finalized() {
        return Err(Error::Finalize(
            "finalized models are stored only as an REE/TEE file pair".into(),
        ));
    }
    let mut c = Container::new(kind, meta, &[("ree", &model.ree), ("tee", &model.tee)]);
    c.header.merge_edges = Some(model.merge_points.iter().map(|&m| m.into()).collect());
    Ok(c)
}

fn model_from(mut c: Container, path: &Path) -> Result<(TwoBranchModel, Meta)> {
    if c.branches.len() != 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: PREAMBLE_BYTES as u64,
            detail: format!("{} branches, expected 2", c.branches.len()),
        });
    }
    let edges = c.header.merge_edges.take().unwrap_or_default();
    let merge_points = edges.into_iter().map(MergePoint::try_from).collect::<Result<_>>()?;
    let tee = c.branches.pop().expect("two branches");
    let ree = c.branches.pop().expect("two branches");
    let model = TwoBranchModel {
        ree,
        tee,
        merge_points,
        alignment: None,
    };
    model.validate()?;
    Ok((model, c.header.meta))
}

pub fn write_two_branch(path: &Path, model: &TwoBranchModel, meta: Meta) -> Result<()> {
    two_branch_container(ContainerKind::TwoBranch, model, meta)?.write(path)
}

pub fn read_two_branch(path: &Path) -> Result<(TwoBranchModel, Meta)> {
    let c = Container::read(path)?.expect(ContainerKind::TwoBranch, path)?;
    model_from(c, path)
}

pub fn write_checkpoint(path: &Path, model: &TwoBranchModel, meta: Meta) -> Result<()> {
    two_branch_container(ContainerKind::Checkpoint, model, meta)?.write(path)
}

pub fn read_checkpoint(path: &Path) -> Result<(TwoBranchModel, Meta)> {
    let c = Container::read(path)?.expect(ContainerKind::Checkpoint, path)?;
    model_from(c, path)
}

/// What the REE side of a deployment holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReeArtifact {
    pub graph: BranchGraph,
    /// M_R layers whose outputs are sent, in send order.
    pub export_layers: Vec<usize>,
    pub meta: Meta,
}

/// What the TEE side of a deployment holds.
#[derive(Debug, Clone, PartialEq)]
pub struct TeeArtifact {
    pub graph: BranchGraph,
    pub merge_points: Vec<MergePoint>,
    pub alignment: Vec<AlignmentMap>,
    pub meta: Meta,
}

fn require_finalized(model: &TwoBranchModel) -> Result<&[AlignmentMap]> {
    model
        .alignment
        .as_deref()
        .ok_or_else(|| Error::Finalize("split export requires a finalized model".into()))
}

/// M_R only: architecture, weights and which outputs it sends.
pub fn write_ree(path: &Path, model: &TwoBranchModel, meta: Meta) -> Result<()> {
    require_finalized(model)?;
    let mut c = Container::new(ContainerKind::Ree, meta, &[("ree", &model.ree)]);
    c.header.export_layers = Some(model.merge_points.iter().map(|m| m.ree_layer).collect());
    c.write(path)
}

pub fn write_tee(path: &Path, model: &TwoBranchModel, meta: Meta) -> Result<()> {
    let maps = require_finalized(model)?;
    let mut c = Container::new(ContainerKind::Tee, meta, &[("tee", &model.tee)]);
    c.header.merge_edges = Some(model.merge_points.iter().map(|&m| m.into()).collect());
    c.header.alignment_maps = Some(maps.to_vec());
    c.write(path)
}

pub fn read_ree(path: &Path) -> Result<ReeArtifact> {
    let mut c = Container::read(path)?.expect(ContainerKind::Ree, path)?;
    Ok(ReeArtifact {
        graph: c.branches.remove(0),
        export_layers: c.header.export_layers.unwrap_or_default(),
        meta: c.header.meta,
    })
}

pub fn read_tee(path: &Path) -> Result<TeeArtifact> {
    let mut c = Container::read(path)?.expect(ContainerKind::Tee, path)?;
    let merge_points = c
        .header
        .merge_edges
        .take()
        .unwrap_or_default()
        .into_iter()
        .map(MergePoint::try_from)
        .collect::<Result<Vec<_>>>()?;
    let alignment = c.header.alignment_maps.take().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: PREAMBLE_BYTES as u64,
        detail: "TEE file carries no alignment maps".into(),
    })?;
    if alignment.len() != merge_points.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: PREAMBLE_BYTES as u64,
            detail: "one alignment map per merge point required".into(),
        });
    }
    Ok(TeeArtifact {
        graph: c.branches.remove(0),
        merge_points,
        alignment,
        meta: c.header.meta,
    })
}

/// Reassembles a finalized model from its split files.
pub fn import_split(ree_path: &Path, tee_path: &Path) -> Result<TwoBranchModel> {
    let ree = read_ree(ree_path)?;
    let tee = read_tee(tee_path)?;
    let sent: Vec<usize> = tee.merge_points.iter().map(|m| m.ree_layer).collect();
    if sent != ree.export_layers {
        return Err(Error::Pairing(format!(
            "REE sends layers {:?}, TEE expects {sent:?}",
            ree.export_layers
        )));
    }
    let model = TwoBranchModel {
        ree: ree.graph,
        tee: tee.graph,
        merge_points: tee.merge_points,
        alignment: Some(tee.alignment),
    };
    model.validate()?;
    Ok(model)
}

/// Which branch a file's weights belong to.
pub fn role_of(kind: ContainerKind) -> Option<BranchRole> {
    match kind {
        ContainerKind::Ree => Some(BranchRole::Ree),
        ContainerKind::Tee => Some(BranchRole::Tee),
        _ => None,
    }
}

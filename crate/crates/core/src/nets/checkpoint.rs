//! Checkpoint file: `LAXCKPT1`, manifest length (`u64` LE), manifest JSON,
//! then one blob per part in binding order. Slots store their layer blob
//! followed by raw-tensor blobs for each pathway; loose tensors are raw
//! tensor blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_net, wrap_lora, LoraSpec, Net, NetSpec, PartMut, PartRef};
use crate::error::{LaxError, Result};
use crate::lax::{Gate, GateVariant, LaxNorm, LaxPathway, LaxSlot, NormPlacement};
use crate::layers::{read_layer, read_tensor, write_layer, write_tensor};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LAXCKPT1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    net: NetSpec,
    #[serde(default)]
    lora: Option<LoraSpec>,
    slots: Vec<SlotEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotEntry {
    id: String,
    kind: String,
    stream: Option<String>,
    pathways: Vec<PathwayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathwayEntry {
    intra: bool,
    source: String,
    target: String,
    gate: GateVariant,
    source_rank: usize,
    trainable: bool,
    norm: NormPlacement,
    eps: f64,
}

fn fmt(msg: impl Into<String>) -> LaxError {
    LaxError::Format(msg.into())
}

fn entry(s: &LaxSlot) -> SlotEntry {
    let pathway = |intra: bool, p: &LaxPathway| PathwayEntry {
        intra,
        source: p.source_label.clone(),
        target: p.target_label.clone(),
        gate: p.gate.variant(),
        source_rank: p.gate.source_rank(),
        trainable: p.gate.trainable,
        norm: p.placement(),
        eps: p.norm.as_ref().map_or(0.0, |n| n.eps),
    };
    SlotEntry {
        id: s.id.clone(),
        kind: s.layer.kind().to_string(),
        stream: s.stream.clone(),
        pathways: s
            .inter
            .iter()
            .map(|p| pathway(false, p))
            .chain(s.intra.iter().map(|p| pathway(true, p)))
            .collect(),
    }
}

pub fn save_checkpoint(net: &Net, path: &Path) -> Result<()> {
    let lora = match net {
        Net::Transformer(m) => m.lora.clone(),
        Net::Chain(_) => None,
    };
    let manifest = Manifest {
        net: net.spec(),
        lora,
        slots: net.slots().into_iter().map(entry).collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| fmt(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for part in net.parts() {
        match part {
            PartRef::Tensor(_, t) => write_tensor(&mut w, t)?,
            PartRef::Slot(s) => {
                write_layer(&mut w, &s.layer)?;
                for p in s.inter.iter().chain(&s.intra) {
                    let mut g = p.gate.clone();
                    let mut ts = Vec::new();
                    g.tensors_mut(&mut ts);
                    for t in ts {
                        write_tensor(&mut w, t)?;
                    }
                    if let Some(n) = &p.norm {
                        write_tensor(&mut w, &n.gain)?;
                        write_tensor(&mut w, &n.bias)?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_pathway(r: &mut impl Read, e: &PathwayEntry) -> Result<LaxPathway> {
    let mut gate = match e.gate {
        GateVariant::Identity => Gate::identity(e.source_rank),
        GateVariant::Linear => {
            let beta = read_tensor(r)?;
            if beta.len() != 1 {
                return Err(fmt("linear gate blob must hold one value"));
            }
            Gate::linear(e.source_rank, beta.item())
        }
        GateVariant::Tensor => {
            let c0 = read_tensor(r)?;
            let c1 = read_tensor(r)?;
            Gate::tensor(c0, c1).map_err(|e| fmt(e.to_string()))?
        }
        GateVariant::Dense => Gate::dense(read_tensor(r)?).map_err(|e| fmt(e.to_string()))?,
    };
    if gate.source_rank() != e.source_rank {
        return Err(fmt(format!(
            "gate source rank {} != manifest {}",
            gate.source_rank(),
            e.source_rank
        )));
    }
    gate.trainable = e.trainable;
    let norm = match e.norm {
        NormPlacement::Off => None,
        placement => Some(LaxNorm {
            placement,
            gain: read_tensor(r)?,
            bias: read_tensor(r)?,
            eps: e.eps,
        }),
    };
    Ok(LaxPathway::new(&e.source, &e.target, gate, norm))
}

/// Rebuilds the network skeleton from the manifest, then restores every
/// parameter, gate and stream from the blobs.
pub fn load_checkpoint(path: &Path) -> Result<Net> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt("not a checkpoint file"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 28 {
        return Err(fmt(format!("manifest of {len} bytes")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| fmt(format!("manifest: {e}")))?;

    let mut net = build_net(&manifest.net)?;
    if let (Some(l), Net::Transformer(m)) = (&manifest.lora, &net) {
        net = Net::Transformer(wrap_lora(m, l)?);
    }
    let mut entries = manifest.slots.iter();
    for part in net.parts_mut() {
        match part {
            PartMut::Tensor(name, t) => {
                let v: Tensor = read_tensor(&mut r)?;
                if v.shape() != t.shape() {
                    return Err(fmt(format!("{name}: stored {:?}, expected {:?}", v.shape(), t.shape())));
                }
                *t = v;
            }
            PartMut::Slot(s) => {
                let e = entries.next().ok_or_else(|| fmt("manifest lists too few slots"))?;
                if e.id != s.id {
                    return Err(fmt(format!("slot {} found where {} was expected", e.id, s.id)));
                }
                let layer = read_layer(&mut r)?;
                if layer.kind() != e.kind || layer.d_in() != s.layer.d_in() || layer.d_out() != s.layer.d_out() {
                    return Err(fmt(format!("{}: stored layer does not fit the model", s.id)));
                }
                s.layer = layer;
                s.stream = e.stream.clone();
                s.inter = None;
                s.intra.clear();
                for pe in &e.pathways {
                    let p = read_pathway(&mut r, pe)?;
                    if pe.intra {
                        s.intra.push(p);
                    } else {
                        s.inter = Some(p);
                    }
                }
            }
        }
    }
    if entries.next().is_some() {
        return Err(fmt("manifest lists more slots than the model has"));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fmt("trailing bytes after the last blob"));
    }
    Ok(net)
}

use std::collections::BTreeMap;

use super::spec::{AttentionKind, HeadKind, InputKind, LaxSpec, ModelSpec, QkvLayout, Readout};
use super::{Bound, Cursor, Input, PartMut, PartRef};
use crate::error::{dim_err, LaxError, Result};
use crate::lax::{tt_intra_pathways, Gate, GateKind, LatentBus, LaxNorm, LaxPathway, LaxSlot, NormPlacement};
use crate::layers::{DenseLinear, LatentRecord, Linear};
use crate::numerics::{Activation, Binder, Init, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Embed {
    Tokens {
        tok: Tensor,
        pos: Tensor,
    },
    Patches {
        proj: LaxSlot,
        cls: Option<Tensor>,
        pos: Tensor,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    /// `[qkv]` or `[q, k, v]`.
    pub attn: Vec<LaxSlot>,
    pub proj: LaxSlot,
    pub ln2: Norm,
    pub mlp_up: LaxSlot,
    pub mlp_down: LaxSlot,
}

impl Block {
    /// Slots with their adapter role names.
    pub fn roles_mut(&mut self) -> Vec<(&'static str, &mut LaxSlot)> {
        let mut out: Vec<(&'static str, &mut LaxSlot)> = Vec::new();
        if self.attn.len() == 1 {
            out.push(("qkv", &mut self.attn[0]));
        } else {
            for (role, s) in ["q", "k", "v"].into_iter().zip(self.attn.iter_mut()) {
                out.push((role, s));
            }
        }
        out.push(("o", &mut self.proj));
        out.push(("up", &mut self.mlp_up));
        out.push(("down", &mut self.mlp_down));
        out
    }
}

/// Pre-LN transformer with low-rank, LaX-wired linear layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub embed: Embed,
    pub blocks: Vec<Block>,
    pub final_ln: Norm,
    pub head: LaxSlot,
    /// Freezes embeddings, norms and dense layers (adapter fine-tuning).
    pub frozen: bool,
    pub lora: Option<super::spec::LoraSpec>,
}

/// Assigns streams and builds inter-layer pathways in construction order.
pub(crate) struct Wiring<'a> {
    lax: &'a LaxSpec,
    norm: NormPlacement,
    init: &'a Init,
    prev: BTreeMap<String, usize>,
}

impl<'a> Wiring<'a> {
    pub(crate) fn new(lax: &'a LaxSpec, default_norm: NormPlacement, init: &'a Init) -> Self {
        Self {
            lax,
            norm: lax.norm_or(default_norm),
            init,
            prev: BTreeMap::new(),
        }
    }

    pub(crate) fn slot(&mut self, id: String, layer: Linear, stream: &str) -> Result<LaxSlot> {
        let mut slot = LaxSlot::plain(&id, layer);
        let Some(rank) = slot.layer.latent_rank() else {
            return Ok(slot);
        };
        if !self.lax.carries(stream) {
            return Ok(slot);
        }
        slot.stream = Some(stream.to_string());
        if let Some(prev) = self.prev.insert(stream.to_string(), rank) {
            let mut gate = Gate::init(
                self.init,
                &format!("{id}.lax.gate"),
                self.lax.gate_for(stream),
                prev,
                rank,
            )?;
            if let GateKind::Linear { beta } = &mut gate.kind {
                *beta = Tensor::scalar(self.lax.beta);
            }
            gate.trainable = self.lax.train_gates;
            let dim = match self.norm {
                NormPlacement::Output => slot.layer.d_out(),
                _ => rank,
            };
            slot.inter = Some(LaxPathway::new("latent", "latent", gate, LaxNorm::new(self.norm, dim)));
        }
        if self.lax.intra_tt {
            if let Linear::Tt(tt) = &slot.layer {
                let mut ps = tt_intra_pathways(tt, self.lax.intra_gate, self.init, &id)?;
                for p in &mut ps {
                    p.gate.trainable = self.lax.train_gates;
                }
                slot.intra = ps;
            }
        }
        Ok(slot)
    }
}

/// Deterministic construction from `(spec, spec.seed)`.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let init = Init::new(spec.seed);
    let b = &spec.block;
    let d = b.width;
    let t = spec.seq_len();
    let embed = match spec.input {
        InputKind::Tokens { vocab, .. } => Embed::Tokens {
            tok: init.normal("embed.tok", &[vocab, d], 1.0),
            pos: init.normal("embed.pos", &[t, d], 0.1),
        },
        InputKind::Patches {
            patch_dim, cls_token, ..
        } => Embed::Patches {
            proj: LaxSlot::plain(
                "embed.patch",
                Linear::Dense(DenseLinear::init(&init, "embed.patch", patch_dim, d, true)),
            ),
            cls: cls_token.then(|| init.normal("embed.cls", &[1, d], 1.0)),
            pos: init.normal("embed.pos", &[t, d], 0.1),
        },
    };
    let mut wiring = Wiring::new(&spec.lax, NormPlacement::Latent, &init);
    let mut blocks = Vec::with_capacity(spec.depth);
    for i in 0..spec.depth {
        let id = |p: &str| format!("blocks.{i}.{p}");
        let mut attn = Vec::new();
        match b.qkv_layout {
            QkvLayout::Fused => {
                let l = b.qkv.build(&init, &id("qkv"), d, 3 * d)?;
                attn.push(wiring.slot(id("qkv"), l, "qkv")?);
            }
            QkvLayout::Separate => {
                for s in ["q", "k", "v"] {
                    let l = b.qkv.build(&init, &id(s), d, d)?;
                    attn.push(wiring.slot(id(s), l, s)?);
                }
            }
        }
        let proj = wiring.slot(id("proj"), b.proj.build(&init, &id("proj"), d, d)?, "proj")?;
        let up = b.mlp_up.build(&init, &id("mlp_up"), d, b.hidden())?;
        let mlp_up = wiring.slot(id("mlp_up"), up, "mlp_up")?;
        let down = b.mlp_down.build(&init, &id("mlp_down"), b.hidden(), d)?;
        let mlp_down = wiring.slot(id("mlp_down"), down, "mlp_down")?;
        blocks.push(Block {
            ln1: Norm::new(d),
            attn,
            proj,
            ln2: Norm::new(d),
            mlp_up,
            mlp_down,
        });
    }
    let classes = match spec.head {
        HeadKind::Lm { vocab } => vocab,
        HeadKind::Classify { classes, .. } => classes,
    };
    let head = LaxSlot::plain(
        "head",
        Linear::Dense(DenseLinear::init(&init, "head", d, classes, true)),
    );
    Ok(Model {
        spec: spec.clone(),
        embed,
        blocks,
        final_ln: Norm::new(d),
        head,
        frozen: false,
        lora: None,
    })
}

macro_rules! model_parts {
    ($m:expr, $($r:tt)+) => {{
        let m = $m;
        let mut out = Vec::new();
        match $($r)+ m.embed {
            Embed::Tokens { tok, pos } => {
                out.push(Part::Tensor("embed.tok".to_string(), tok));
                out.push(Part::Tensor("embed.pos".to_string(), pos));
            }
            Embed::Patches { proj, cls, pos } => {
                out.push(Part::Slot(proj));
                if let Some(c) = cls {
                    out.push(Part::Tensor("embed.cls".to_string(), c));
                }
                out.push(Part::Tensor("embed.pos".to_string(), pos));
            }
        }
        for (i, b) in ($($r)+ m.blocks).into_iter().enumerate() {
            out.push(Part::Tensor(format!("blocks.{i}.ln1.gain"), $($r)+ b.ln1.gain));
            out.push(Part::Tensor(format!("blocks.{i}.ln1.bias"), $($r)+ b.ln1.bias));
            for s in ($($r)+ b.attn).into_iter() {
                out.push(Part::Slot(s));
            }
            out.push(Part::Slot($($r)+ b.proj));
            out.push(Part::Tensor(format!("blocks.{i}.ln2.gain"), $($r)+ b.ln2.gain));
            out.push(Part::Tensor(format!("blocks.{i}.ln2.bias"), $($r)+ b.ln2.bias));
            out.push(Part::Slot($($r)+ b.mlp_up));
            out.push(Part::Slot($($r)+ b.mlp_down));
        }
        out.push(Part::Tensor("final_ln.gain".to_string(), $($r)+ m.final_ln.gain));
        out.push(Part::Tensor("final_ln.bias".to_string(), $($r)+ m.final_ln.bias));
        out.push(Part::Slot($($r)+ m.head));
        out
    }};
}

impl Model {
    /// Every parameter holder in binding order.
    pub fn parts(&self) -> Vec<PartRef<'_>> {
        use PartRef as Part;
        model_parts!(self, &)
    }

    pub fn parts_mut(&mut self) -> Vec<PartMut<'_>> {
        use PartMut as Part;
        model_parts!(self, &mut)
    }

    pub fn slots(&self) -> Vec<&LaxSlot> {
        self.parts()
            .into_iter()
            .filter_map(|p| match p {
                PartRef::Slot(s) => Some(s),
                PartRef::Tensor(..) => None,
            })
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.head.layer.d_out()
    }

    fn causal(&self) -> bool {
        matches!(self.spec.head, HeadKind::Lm { .. })
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Bound],
        input: &Input,
        mut trace: Option<&mut Vec<LatentRecord>>,
    ) -> Result<Var> {
        let mut cur = Cursor::new(vars);
        let d = self.spec.block.width;
        let mut bus = LatentBus::new();
        let (mut h, batch, t) = match (&self.embed, input) {
            (Embed::Tokens { pos, .. }, Input::Tokens { ids, batch }) => {
                let batch = *batch;
                if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
                    return dim_err(format!("{} token ids do not split into {batch} sequences", ids.len()));
                }
                let t = ids.len() / batch;
                if t > pos.rows() {
                    return dim_err(format!("sequence length {t} exceeds max_len {}", pos.rows()));
                }
                let tok = cur.tensor()?;
                let pv = cur.tensor()?;
                let e = tape.embedding(tok, ids)?;
                let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
                let p = tape.embedding(pv, &positions)?;
                (tape.add(e, p)?, batch, t)
            }
            (Embed::Patches { proj, cls, pos }, Input::Patches { x, batch }) => {
                let batch = *batch;
                if batch == 0 || x.ndim() != 2 || x.rows() % batch != 0 {
                    return dim_err(format!(
                        "patch input {:?} does not split into {batch} images",
                        x.shape()
                    ));
                }
                let np = x.rows() / batch;
                let xv = tape.constant(x.clone());
                let e = proj.forward(tape, cur.slot()?, xv, &mut bus, None)?;
                let (e, t) = match cls {
                    Some(_) => {
                        let cv = cur.tensor()?;
                        let c = tape.embedding(cv, &vec![0; batch])?;
                        let c = tape.reshape(c, &[batch, 1, d])?;
                        let e = tape.reshape(e, &[batch, np, d])?;
                        let e = tape.concat(c, e, 1)?;
                        (tape.reshape(e, &[batch * (np + 1), d])?, np + 1)
                    }
                    None => (e, np),
                };
                if t != pos.rows() {
                    return dim_err(format!("{t} positions, model expects {}", pos.rows()));
                }
                let pv = cur.tensor()?;
                let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
                let p = tape.embedding(pv, &positions)?;
                (tape.add(e, p)?, batch, t)
            }
            _ => return dim_err("input kind does not match the model's embedding"),
        };

        for block in &self.blocks {
            let (g, b) = (cur.tensor()?, cur.tensor()?);
            let a = tape.layer_norm(h, g, b, NORM_EPS)?;
            let mut outs = Vec::with_capacity(3);
            for s in &block.attn {
                outs.push(s.forward(tape, cur.slot()?, a, &mut bus, trace.as_deref_mut())?);
            }
            let (q, k, v) = if outs.len() == 1 {
                (
                    tape.narrow(outs[0], 1, 0, d)?,
                    tape.narrow(outs[0], 1, d, d)?,
                    tape.narrow(outs[0], 1, 2 * d, d)?,
                )
            } else {
                (outs[0], outs[1], outs[2])
            };
            let att = match self.spec.block.attention {
                AttentionKind::Softmax => attention(tape, q, k, v, batch, t, self.spec.block.heads, self.causal())?,
                AttentionKind::Bypass => v,
            };
            let o = block
                .proj
                .forward(tape, cur.slot()?, att, &mut bus, trace.as_deref_mut())?;
            h = tape.add(h, o)?;
            let (g, b) = (cur.tensor()?, cur.tensor()?);
            let m = tape.layer_norm(h, g, b, NORM_EPS)?;
            let u = block
                .mlp_up
                .forward(tape, cur.slot()?, m, &mut bus, trace.as_deref_mut())?;
            let u = tape.activation(u, Activation::Gelu)?;
            let dn = block
                .mlp_down
                .forward(tape, cur.slot()?, u, &mut bus, trace.as_deref_mut())?;
            h = tape.add(h, dn)?;
        }
        let (g, b) = (cur.tensor()?, cur.tensor()?);
        h = tape.layer_norm(h, g, b, NORM_EPS)?;
        if let HeadKind::Classify { readout, .. } = self.spec.head {
            let at = match readout {
                Readout::Last => t - 1,
                Readout::First => 0,
            };
            let r = tape.reshape(h, &[batch, t, d])?;
            let r = tape.narrow(r, 1, at, 1)?;
            h = tape.reshape(r, &[batch, d])?;
        }
        let logits = self.head.forward(tape, cur.slot()?, h, &mut bus, None)?;
        cur.finish()?;
        Ok(logits)
    }
}

/// Multi-head scaled dot-product attention over `[b·t, d]` projections.
#[allow(clippy::too_many_arguments)]
fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, b: usize, t: usize, heads: usize, causal: bool) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[b, t, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, t, dh])
    };
    let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    let kt = tape.permute(k, &[0, 2, 1])?;
    let s = tape.batch_matmul(q, kt)?;
    let mut s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
    if causal {
        s = tape.causal_mask(s)?;
    }
    let p = tape.softmax(s)?;
    let o = tape.batch_matmul(p, v)?;
    let o = tape.reshape(o, &[b, heads, t, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    tape.reshape(o, &[b * t, d])
}

pub(crate) fn bind_parts(parts: Vec<PartRef<'_>>, frozen: bool, b: &mut Binder) -> Vec<Bound> {
    parts
        .into_iter()
        .map(|p| match p {
            PartRef::Tensor(name, t) => Bound::Tensor(b.bind(&name, t, !frozen)),
            PartRef::Slot(s) => Bound::Slot(s.bind(b)),
        })
        .collect()
}

pub(crate) fn frozen_err(id: &str) -> LaxError {
    LaxError::Config(format!("{id}: adapters need a dense base layer"))
}

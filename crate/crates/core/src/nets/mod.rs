//! Desk-scale networks whose linear layers are low-rank and LaX-wired: a
//! pre-LN transformer, a plain chain of linear slots, and adapter wrapping
//! of a frozen transformer.

mod chain;
mod checkpoint;
mod lora;
mod model;
pub mod spec;

pub use chain::{build_chain, Chain};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use lora::wrap_lora;
pub use model::{build_model, Block, Embed, Model, Norm, NORM_EPS};
pub use spec::{
    AttentionKind, BlockSpec, ChainSpec, HeadKind, InputKind, LaxSpec, LayerKind, LayerSpec, LoraSpec, ModelSpec,
    QkvLayout, Readout, TtShape,
};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::lax::{LaxSlot, SlotVars};
use crate::layers::{LatentRecord, Linear};
use crate::numerics::{Binder, Tape, Tensor, Var};

/// One batch of network input.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    /// Row-major `[batch, seq]` token ids.
    Tokens { ids: Vec<usize>, batch: usize },
    /// `[batch·num_patches, patch_dim]`.
    Patches { x: Tensor, batch: usize },
    /// `[batch, width]` for chains.
    Features(Tensor),
}

/// Parameter holder in binding order.
pub enum PartRef<'a> {
    Tensor(String, &'a Tensor),
    Slot(&'a LaxSlot),
}

pub enum PartMut<'a> {
    Tensor(String, &'a mut Tensor),
    Slot(&'a mut LaxSlot),
}

/// Tape handles of one part.
#[derive(Clone, Debug)]
pub enum Bound {
    Tensor(Var),
    Slot(SlotVars),
}

pub(crate) struct Cursor<'v> {
    vars: &'v [Bound],
    next: usize,
}

impl<'v> Cursor<'v> {
    pub(crate) fn new(vars: &'v [Bound]) -> Self {
        Self { vars, next: 0 }
    }

    fn take(&mut self) -> Result<&'v Bound> {
        let b = self.vars.get(self.next);
        self.next += 1;
        b.map_or_else(|| dim_err("bound parameters exhausted"), Ok)
    }

    pub(crate) fn tensor(&mut self) -> Result<Var> {
        match self.take()? {
            Bound::Tensor(v) => Ok(*v),
            Bound::Slot(_) => dim_err("expected a tensor binding, found a slot"),
        }
    }

    pub(crate) fn slot(&mut self) -> Result<&'v SlotVars> {
        match self.take()? {
            Bound::Slot(s) => Ok(s),
            Bound::Tensor(_) => dim_err("expected a slot binding, found a tensor"),
        }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.next != self.vars.len() {
            return dim_err(format!("{} bindings left unused", self.vars.len() - self.next));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NetSpec {
    Transformer(ModelSpec),
    Chain(ChainSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Net {
    Transformer(Model),
    Chain(Chain),
}

/// Forward result with every slot's latent stages.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch, seq, vocab]` for language models; `[batch, out]` otherwise.
    pub logits: Tensor,
    pub trace: Vec<LatentRecord>,
}

pub fn build_net(spec: &NetSpec) -> Result<Net> {
    Ok(match spec {
        NetSpec::Transformer(m) => Net::Transformer(build_model(m)?),
        NetSpec::Chain(c) => Net::Chain(build_chain(c)?),
    })
}

impl Net {
    pub fn spec(&self) -> NetSpec {
        match self {
            Net::Transformer(m) => NetSpec::Transformer(m.spec.clone()),
            Net::Chain(c) => NetSpec::Chain(c.spec.clone()),
        }
    }

    /// The spec with its wiring reset, for comparing base architectures.
    pub fn spec_without_lax(&self) -> NetSpec {
        let mut spec = self.spec();
        match &mut spec {
            NetSpec::Transformer(m) => m.lax = LaxSpec::default(),
            NetSpec::Chain(c) => c.lax = LaxSpec::default(),
        }
        spec
    }

    fn frozen(&self) -> bool {
        matches!(self, Net::Transformer(m) if m.frozen)
    }

    pub fn parts(&self) -> Vec<PartRef<'_>> {
        match self {
            Net::Transformer(m) => m.parts(),
            Net::Chain(c) => c.slots.iter().map(PartRef::Slot).collect(),
        }
    }

    pub fn parts_mut(&mut self) -> Vec<PartMut<'_>> {
        match self {
            Net::Transformer(m) => m.parts_mut(),
            Net::Chain(c) => c.slots.iter_mut().map(PartMut::Slot).collect(),
        }
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

    pub fn slots_mut(&mut self) -> Vec<&mut LaxSlot> {
        self.parts_mut()
            .into_iter()
            .filter_map(|p| match p {
                PartMut::Slot(s) => Some(s),
                PartMut::Tensor(..) => None,
            })
            .collect()
    }

    pub fn bind(&self, b: &mut Binder) -> Vec<Bound> {
        model::bind_parts(self.parts(), self.frozen(), b)
    }

    /// All parameter tensors (frozen included), aligned with the binding order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in self.parts_mut() {
            match p {
                PartMut::Tensor(_, t) => out.push(t),
                PartMut::Slot(s) => s.tensors_mut(&mut out),
            }
        }
        out
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Bound],
        input: &Input,
        trace: Option<&mut Vec<LatentRecord>>,
    ) -> Result<Var> {
        match (self, input) {
            (Net::Transformer(m), _) => m.forward(tape, vars, input, trace),
            (Net::Chain(c), Input::Features(x)) => {
                let xv = tape.constant(x.clone());
                c.forward(tape, vars, xv, trace)
            }
            (Net::Chain(_), _) => dim_err("chains take feature input"),
        }
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        let frozen = self.frozen();
        self.parts()
            .iter()
            .map(|p| match p {
                PartRef::Tensor(_, t) if !frozen => t.len(),
                PartRef::Tensor(..) => 0,
                PartRef::Slot(s) => s.param_count(),
            })
            .sum()
    }

    /// Every parameter including frozen weights.
    pub fn total_param_count(&self) -> usize {
        self.parts()
            .iter()
            .map(|p| match p {
                PartRef::Tensor(_, t) => t.len(),
                PartRef::Slot(s) => s.total_param_count(),
            })
            .sum()
    }

    /// Parameters of gates and pathway norms.
    pub fn lax_param_count(&self) -> usize {
        self.slots().iter().map(|s| s.lax_param_count()).sum()
    }

    /// Makes every gate output exactly zero.
    pub fn zero_gates(&mut self) {
        for s in self.slots_mut() {
            for p in s.pathways_mut() {
                p.gate.set_zero();
            }
        }
    }

    /// Removes every pathway and stream, leaving the base layers.
    pub fn strip_lax(&mut self) {
        for s in self.slots_mut() {
            s.stream = None;
            s.inter = None;
            s.intra.clear();
        }
    }

    pub fn layers(&self) -> Vec<&Linear> {
        self.slots().into_iter().map(|s| &s.layer).collect()
    }
}

/// Deterministic evaluation on a scratch tape.
pub fn model_forward(net: &Net, input: &Input, trace: bool) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut Binder::new(&mut tape));
    let mut records = Vec::new();
    let y = net.forward(&mut tape, &vars, input, trace.then_some(&mut records))?;
    let mut logits = tape.value(y).clone();
    if let (Net::Transformer(m), Input::Tokens { ids, batch }) = (net, input) {
        if let HeadKind::Lm { vocab } = m.spec.head {
            logits = logits.reshape(&[*batch, ids.len() / batch, vocab])?;
        }
    }
    Ok(ForwardOutput { logits, trace: records })
}

#[cfg(test)]
mod tests;

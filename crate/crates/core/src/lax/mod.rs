//! Latent crossing: gated residuals between the bottleneck latents of
//! same-type low-rank layers.
//!
//! A [`LaxSlot`] wraps one low-rank layer. On the forward pass it reads the
//! previous latent of its stream from the [`LatentBus`], fuses
//! `z = h + G(h_prev)` before the up-projection, and publishes its own pure
//! latent `h`. TT layers can also carry intra-layer pathways from input-phase
//! stages to mirrored output-phase stages.

mod gate;

pub use gate::{gate_apply, most_square_fold, Gate, GateKind, GateVariant};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LaxError, Result};
use crate::layers::{LatentRecord, Linear, Stage, StageHook, TtLayer};
use crate::numerics::{ops, Binder, Init, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Where a pathway's layer norm sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Off,
    /// Over the fused latent `z`, before the up-projection.
    #[default]
    Latent,
    /// Over the layer output, after the up-projection.
    Output,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaxNorm {
    pub placement: NormPlacement,
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LaxNorm {
    /// Unit gain, zero bias over `dim` features. `None` for `Off`.
    pub fn new(placement: NormPlacement, dim: usize) -> Option<Self> {
        (placement != NormPlacement::Off).then(|| Self {
            placement,
            gain: Tensor::ones(&[dim]),
            bias: Tensor::zeros(&[dim]),
            eps: LN_EPS,
        })
    }

    pub fn param_count(&self) -> usize {
        self.gain.len() + self.bias.len()
    }
}

/// One residual route: `source` latent, through `gate`, into `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaxPathway {
    pub source_label: String,
    pub target_label: String,
    pub gate: Gate,
    pub norm: Option<LaxNorm>,
}

/// Tape handles of one bound pathway.
#[derive(Clone, Debug)]
pub struct PathwayVars {
    pub gate: Vec<Var>,
    pub norm: Option<(Var, Var)>,
}

impl LaxPathway {
    pub fn new(source: &str, target: &str, gate: Gate, norm: Option<LaxNorm>) -> Self {
        Self {
            source_label: source.to_string(),
            target_label: target.to_string(),
            gate,
            norm,
        }
    }

    pub fn param_count(&self) -> usize {
        self.gate.param_count() + self.norm.as_ref().map_or(0, LaxNorm::param_count)
    }

    /// Norm parameters always train; gate parameters only with the gate.
    pub fn trainable_param_count(&self) -> usize {
        let gate = if self.gate.trainable {
            self.gate.param_count()
        } else {
            0
        };
        gate + self.norm.as_ref().map_or(0, LaxNorm::param_count)
    }

    pub fn placement(&self) -> NormPlacement {
        self.norm.as_ref().map_or(NormPlacement::Off, |n| n.placement)
    }

    pub fn bind(&self, b: &mut Binder) -> PathwayVars {
        b.push("gate");
        let gate = self.gate.bind(b);
        b.pop();
        let norm = self.norm.as_ref().map(|n| {
            b.push("norm");
            let v = (b.bind("gain", &n.gain, true), b.bind("bias", &n.bias, true));
            b.pop();
            v
        });
        PathwayVars { gate, norm }
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.gate.tensors_mut(out);
        if let Some(n) = &mut self.norm {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        }
    }

    fn normalize(&self, tape: &mut Tape, vars: &PathwayVars, x: Var, at: NormPlacement) -> Result<Var> {
        match (&self.norm, vars.norm) {
            (Some(n), Some((g, b))) if n.placement == at => tape.layer_norm(x, g, b, n.eps),
            _ => Ok(x),
        }
    }
}

/// Most recent latent per stream tag.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBus<T = LatentRecord> {
    entries: BTreeMap<String, T>,
}

impl<T> Default for LatentBus<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<T> LatentBus<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(&self, stream: &str) -> Option<&T> {
        self.entries.get(stream)
    }

    /// Replaces the stream's entry.
    pub fn update(&mut self, stream: &str, value: T) {
        self.entries.insert(stream.to_string(), value);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn streams(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// A linear layer together with its LaX wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct LaxSlot {
    pub id: String,
    pub layer: Linear,
    /// Stream the slot reads from and publishes to; `None` opts out.
    pub stream: Option<String>,
    /// Inter-layer pathway from the previous latent on the stream.
    pub inter: Option<LaxPathway>,
    /// Intra-layer TT pathways.
    pub intra: Vec<LaxPathway>,
}

#[derive(Clone, Debug)]
pub struct SlotVars {
    pub layer: Vec<Var>,
    pub inter: Option<PathwayVars>,
    pub intra: Vec<PathwayVars>,
}

impl LaxSlot {
    pub fn plain(id: &str, layer: Linear) -> Self {
        Self {
            id: id.to_string(),
            layer,
            stream: None,
            inter: None,
            intra: Vec::new(),
        }
    }

    /// Trainable parameters.
    pub fn param_count(&self) -> usize {
        let lax: usize = self
            .inter
            .iter()
            .chain(&self.intra)
            .map(LaxPathway::trainable_param_count)
            .sum();
        self.layer.param_count() + lax
    }

    pub fn total_param_count(&self) -> usize {
        self.layer.total_param_count() + self.lax_param_count()
    }

    /// Parameters added by gates and pathway norms.
    pub fn lax_param_count(&self) -> usize {
        self.inter.iter().chain(&self.intra).map(LaxPathway::param_count).sum()
    }

    pub fn pathways_mut(&mut self) -> impl Iterator<Item = &mut LaxPathway> {
        self.inter.iter_mut().chain(self.intra.iter_mut())
    }

    pub fn bind(&self, b: &mut Binder) -> SlotVars {
        b.push(self.id.clone());
        let layer = self.layer.bind(b);
        let inter = self.inter.as_ref().map(|p| {
            b.push("lax");
            let v = p.bind(b);
            b.pop();
            v
        });
        let intra = self
            .intra
            .iter()
            .enumerate()
            .map(|(i, p)| {
                b.push(format!("intra{i}"));
                let v = p.bind(b);
                b.pop();
                v
            })
            .collect();
        b.pop();
        SlotVars { layer, inter, intra }
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.layer.tensors_mut(out);
        if let Some(p) = &mut self.inter {
            p.tensors_mut(out);
        }
        for p in &mut self.intra {
            p.tensors_mut(out);
        }
    }

    /// Forward with latent crossing. Reads the previous latent before
    /// publishing this layer's pure latent; appends every stage to `trace`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &SlotVars,
        x: Var,
        bus: &mut LatentBus<Var>,
        trace: Option<&mut Vec<LatentRecord>>,
    ) -> Result<Var> {
        let Some(down) = self.layer.down(tape, &vars.layer, x)? else {
            return self.layer.forward(tape, &vars.layer, x);
        };
        let h = down.latent;
        let prev = self.stream.as_deref().and_then(|s| bus.read(s)).copied();
        let mut z = h;
        let mut fused = None;
        if let (Some(p), Some(pv), Some(hp)) = (&self.inter, &vars.inter, prev) {
            let g = p.gate.apply(tape, &pv.gate, hp)?;
            if tape.shape(g) != tape.shape(h) {
                return dim_err(format!(
                    "gated latent {:?} does not match latent {:?} in {}",
                    tape.shape(g),
                    tape.shape(h),
                    self.id
                ));
            }
            z = tape.add(h, g)?;
            z = p.normalize(tape, pv, z, NormPlacement::Latent)?;
            fused = Some((p, pv));
        }

        let (mut y, out_stages) = if self.intra.is_empty() {
            self.layer.up(tape, &vars.layer, x, z, None)?
        } else {
            let in_stages = &down.stages;
            let intra = &self.intra;
            let intra_vars = &vars.intra;
            let mut hook = |tape: &mut Tape, _j: usize, stage: &Stage| -> Result<Var> {
                let mut v = stage.var;
                for (p, pv) in intra.iter().zip(intra_vars) {
                    if p.target_label != stage.label {
                        continue;
                    }
                    let src = in_stages
                        .iter()
                        .find(|s| s.label == p.source_label)
                        .ok_or_else(|| LaxError::Config(format!("no stage {}", p.source_label)))?;
                    let g = p.gate.apply(tape, &pv.gate, src.var)?;
                    v = tape.add(v, g)?;
                }
                Ok(v)
            };
            self.layer
                .up(tape, &vars.layer, x, z, Some(&mut hook as &mut StageHook<'_>))?
        };
        if let Some((p, pv)) = fused {
            y = p.normalize(tape, pv, y, NormPlacement::Output)?;
        }

        if let Some(s) = &self.stream {
            bus.update(s, h);
        }
        if let Some(trace) = trace {
            let mut latents = Vec::with_capacity(down.stages.len() + out_stages.len());
            for st in down.stages.iter().chain(&out_stages) {
                latents.push((st.label.clone(), tape.value(st.var).reshape(&st.shape)?));
            }
            trace.push(LatentRecord {
                layer_id: self.id.clone(),
                stream: self.stream.clone(),
                latents,
            });
        }
        Ok(y)
    }
}

/// Fused forward of `layer` on concrete inputs: `y = up(h + G(h_prev))`
/// with the pathway's norm, or the plain layer when either is absent.
/// Returns `(y, h)` where `h` is the pure latent of `x`.
pub fn lax_fuse(
    layer: &Linear,
    x: &Tensor,
    h_prev: Option<&Tensor>,
    pathway: Option<&LaxPathway>,
) -> Result<(Tensor, Tensor)> {
    let slot = LaxSlot {
        id: "fuse".into(),
        layer: layer.clone(),
        stream: Some("s".into()),
        inter: pathway.cloned(),
        intra: Vec::new(),
    };
    let mut tape = Tape::new();
    let vars = slot.bind(&mut Binder::new(&mut tape));
    let mut bus = LatentBus::new();
    if let Some(hp) = h_prev {
        let v = tape.constant(hp.clone());
        bus.update("s", v);
    }
    let xv = tape.constant(x.clone());
    let y = slot.forward(&mut tape, &vars, xv, &mut bus, None)?;
    let h = match bus.read("s") {
        Some(&h) => tape.value(h).clone(),
        None => return dim_err("dense layers carry no latent"),
    };
    Ok((tape.value(y).clone(), h))
}

/// `[B·A | B·G·A_prev]`, acting on the stacked input `(x; x_prev)`.
pub fn stacked_weight(b: &Tensor, a: &Tensor, gate: &Gate, a_prev: &Tensor) -> Result<Tensor> {
    let g = gate.materialize()?;
    let left = ops::matmul(b, a)?;
    let right = ops::matmul(b, &ops::matmul(&g, a_prev)?)?;
    ops::concat(&left, &right, 1)
}

/// Intra-layer pathways `in_j → out_{k-j}` for `j = 1..k-1`.
///
/// Identity and Linear gates need identical stage shapes; Tensor and Dense
/// gates need equal free dims and map between the flattened stages.
pub fn tt_intra_pathways(layer: &TtLayer, variant: GateVariant, init: &Init, name: &str) -> Result<Vec<LaxPathway>> {
    let k = layer.half();
    let mut out = Vec::new();
    for j in 1..k {
        let src = layer.in_stage_shape(j, 1);
        let dst = layer.out_stage_shape(k - j, 1);
        let compatible = match variant {
            GateVariant::Identity | GateVariant::Linear => src == dst,
            GateVariant::Tensor | GateVariant::Dense => src[..src.len() - 1] == dst[..dst.len() - 1],
        };
        let (sl, tl) = (format!("in_{j}"), format!("out_{}", k - j));
        if !compatible {
            return Err(LaxError::Pathway {
                source_label: sl,
                source_shape: src[1..].to_vec(),
                target_label: tl,
                target_shape: dst[1..].to_vec(),
            });
        }
        let (fs, ft) = (src[1..].iter().product(), dst[1..].iter().product());
        let gate = Gate::init(init, &format!("{name}.intra{j}"), variant, fs, ft)?;
        out.push(LaxPathway::new(&sl, &tl, gate, None));
    }
    Ok(out)
}

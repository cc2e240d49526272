//! Closed-form parameter and FLOP accounting.
//!
//! Everything here is computed from specs alone, so full-size
//! configurations can be costed without allocating a single weight.


use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{LaxError, Result};
use crate::lax::{most_square_fold, Gate, GateKind, GateVariant, NormPlacement};
use crate::layers::{validate_tt, Linear};
use crate::nets::{
    AttentionKind, BlockSpec, ChainSpec, HeadKind, InputKind, LaxSpec, LayerKind, LayerSpec, LoraSpec, ModelSpec,
    NetSpec, QkvLayout, Readout,
};
use crate::numerics::Activation;

/// FLOP conventions for one forward pass over `n` rows:
///
/// * matmul `[m, k] x [k, p]` costs `2·m·k·p`
/// * a contraction costs twice the product of every index it touches
/// * layer norm over `d` features costs `8·d` per row
/// * any elementwise op costs 1 per output element
///
/// Reshapes, permutes and embedding lookups are free.
pub struct CostModel;

impl CostModel {
    pub const LN_PER_FEATURE: u64 = 8;

    pub fn matmul(m: usize, k: usize, p: usize) -> u64 {
        2 * (m as u64) * (k as u64) * (p as u64)
    }

    pub fn contraction(dims: &[usize]) -> u64 {
        2 * dims.iter().map(|&d| d as u64).product::<u64>()
    }

    pub fn layer_norm(rows: usize, d: usize) -> u64 {
        Self::LN_PER_FEATURE * rows as u64 * d as u64
    }

    pub fn elementwise(count: usize) -> u64 {
        count as u64
    }
}

/// Shape-only description of one linear layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerShape {
    Dense {
        d_in: usize,
        d_out: usize,
        bias: bool,
        frozen: bool,
    },
    Svd {
        d_in: usize,
        d_out: usize,
        rank: usize,
    },
    Cola {
        d_in: usize,
        d_out: usize,
        rank: usize,
        activation: Activation,
    },
    Tt {
        out_dims: Vec<usize>,
        in_dims: Vec<usize>,
        ranks: Vec<usize>,
    },
    /// Frozen `W0` plus a trainable rank-`rank` update.
    Lora {
        d_in: usize,
        d_out: usize,
        rank: usize,
    },
}

impl LayerShape {
    /// Mirrors [`LayerSpec::build`], including its errors.
    pub fn from_spec(spec: &LayerSpec, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let rank = || match spec.rank {
            Some(r) if r > 0 => Ok(r),
            _ => Err(LaxError::Config(format!(
                "{name}: {:?} layer needs a positive rank",
                spec.kind
            ))),
        };
        Ok(match spec.kind {
            LayerKind::Dense => LayerShape::Dense {
                d_in,
                d_out,
                bias: false,
                frozen: false,
            },
            LayerKind::Svd => LayerShape::Svd {
                d_in,
                d_out,
                rank: rank()?,
            },
            LayerKind::Cola => LayerShape::Cola {
                d_in,
                d_out,
                rank: rank()?,
                activation: spec.activation,
            },
            LayerKind::Tt => {
                let s = spec
                    .tt
                    .as_ref()
                    .ok_or_else(|| LaxError::Config(format!("{name}: tt layer needs a \"tt\" shape")))?;
                validate_tt(&s.out_dims, &s.in_dims, &s.ranks).map_err(|e| LaxError::Config(format!("{name}: {e}")))?;
                let shape = LayerShape::Tt {
                    out_dims: s.out_dims.clone(),
                    in_dims: s.in_dims.clone(),
                    ranks: s.ranks.clone(),
                };
                if shape.d_in() != d_in || shape.d_out() != d_out {
                    return Err(LaxError::Config(format!(
                        "{name}: tt factors give {}x{}, position needs {d_out}x{d_in}",
                        shape.d_out(),
                        shape.d_in()
                    )));
                }
                shape
            }
        })
    }

    pub fn of(layer: &Linear) -> Self {
        match layer {
            Linear::Dense(l) => LayerShape::Dense {
                d_in: l.d_in(),
                d_out: l.d_out(),
                bias: l.bias.is_some(),
                frozen: l.frozen,
            },
            Linear::Svd(l) => LayerShape::Svd {
                d_in: l.d_in(),
                d_out: l.d_out(),
                rank: l.rank(),
            },
            Linear::Cola(l) => LayerShape::Cola {
                d_in: l.d_in(),
                d_out: l.d_out(),
                rank: l.rank(),
                activation: l.activation,
            },
            Linear::Tt(l) => LayerShape::Tt {
                out_dims: l.out_dims().to_vec(),
                in_dims: l.in_dims().to_vec(),
                ranks: l.ranks().to_vec(),
            },
            Linear::Lora(l) => LayerShape::Lora {
                d_in: l.d_in(),
                d_out: l.d_out(),
                rank: l.rank(),
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerShape::Dense { .. } => "dense",
            LayerShape::Svd { .. } => "svd",
            LayerShape::Cola { .. } => "cola",
            LayerShape::Tt { .. } => "tt",
            LayerShape::Lora { .. } => "lora",
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            LayerShape::Dense { d_in, .. }
            | LayerShape::Svd { d_in, .. }
            | LayerShape::Cola { d_in, .. }
            | LayerShape::Lora { d_in, .. } => *d_in,
            LayerShape::Tt { in_dims, .. } => in_dims.iter().product(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            LayerShape::Dense { d_out, .. }
            | LayerShape::Svd { d_out, .. }
            | LayerShape::Cola { d_out, .. }
            | LayerShape::Lora { d_out, .. } => *d_out,
            LayerShape::Tt { out_dims, .. } => out_dims.iter().product(),
        }
    }

    pub fn latent_rank(&self) -> Option<usize> {
        match self {
            LayerShape::Dense { .. } => None,
            LayerShape::Svd { rank, .. } | LayerShape::Cola { rank, .. } | LayerShape::Lora { rank, .. } => Some(*rank),
            LayerShape::Tt { ranks, .. } => Some(ranks[ranks.len() / 2]),
        }
    }

    pub fn trainable_params(&self) -> usize {
        match self {
            LayerShape::Dense { frozen: true, .. } => 0,
            LayerShape::Dense { d_in, d_out, bias, .. } => d_in * d_out + if *bias { *d_out } else { 0 },
            LayerShape::Svd { d_in, d_out, rank }
            | LayerShape::Cola { d_in, d_out, rank, .. }
            | LayerShape::Lora { d_in, d_out, rank } => rank * (d_in + d_out),
            LayerShape::Tt {
                out_dims,
                in_dims,
                ranks,
            } => out_dims
                .iter()
                .chain(in_dims)
                .enumerate()
                .map(|(i, d)| ranks[i] * d * ranks[i + 1])
                .sum(),
        }
    }

    pub fn total_params(&self) -> usize {
        match self {
            LayerShape::Dense { d_in, d_out, bias, .. } => d_in * d_out + if *bias { *d_out } else { 0 },
            LayerShape::Lora { d_in, d_out, .. } => d_in * d_out + self.trainable_params(),
            _ => self.trainable_params(),
        }
    }

    /// Forward FLOPs for `n` rows; see [`CostModel`].
    pub fn flops(&self, n: usize) -> u64 {
        match self {
            LayerShape::Dense { d_in, d_out, bias, .. } => {
                let b = if *bias { CostModel::elementwise(n * d_out) } else { 0 };
                CostModel::matmul(n, *d_in, *d_out) + b
            }
            LayerShape::Svd { d_in, d_out, rank } => {
                CostModel::matmul(n, *d_in, *rank) + CostModel::matmul(n, *rank, *d_out)
            }
            LayerShape::Cola {
                d_in,
                d_out,
                rank,
                activation,
            } => {
                let act = match activation {
                    Activation::Identity => 0,
                    _ => CostModel::elementwise(n * rank),
                };
                CostModel::matmul(n, *d_in, *rank) + CostModel::matmul(n, *rank, *d_out) + act
            }
            LayerShape::Tt {
                out_dims,
                in_dims,
                ranks,
            } => tt_flops(out_dims, in_dims, ranks, n),
            // frozen product, adapter, then the scale and the add
            LayerShape::Lora { d_in, d_out, rank } => {
                CostModel::matmul(n, *d_in, *d_out)
                    + CostModel::matmul(n, *d_in, *rank)
                    + CostModel::matmul(n, *rank, *d_out)
                    + 2 * CostModel::elementwise(n * d_out)
            }
        }
    }
}

/// Exact sum over the chain: input cores right to left, then output cores.
fn tt_flops(out_dims: &[usize], in_dims: &[usize], ranks: &[usize], n: usize) -> u64 {
    let k = out_dims.len();
    let dims: Vec<usize> = out_dims.iter().chain(in_dims).copied().collect();
    let mut total = 0;
    for i in (k..2 * k).rev() {
        let rest: usize = dims[k..i].iter().product();
        total += CostModel::contraction(&[n, rest, dims[i], ranks[i + 1], ranks[i]]);
    }
    for i in (0..k).rev() {
        let emitted: usize = dims[i + 1..k].iter().product();
        total += CostModel::contraction(&[n, emitted, ranks[i + 1], dims[i], ranks[i]]);
    }
    total
}

pub fn layer_flops(layer: &LayerShape, n: usize) -> u64 {
    layer.flops(n)
}

/// Shape-only description of a gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GateShape {
    pub variant: GateVariant,
    pub source_rank: usize,
    pub target_rank: usize,
    /// `(r0, r1)` and `(r0', r1')` of a tensor gate.
    pub fold: (usize, usize),
    pub out_fold: (usize, usize),
}

impl GateShape {
    /// Mirrors [`Gate::init`]: identity and linear gates need equal ranks.
    pub fn new(variant: GateVariant, source_rank: usize, target_rank: usize) -> Result<Self> {
        if matches!(variant, GateVariant::Identity | GateVariant::Linear) && source_rank != target_rank {
            return Err(LaxError::Dimension(format!(
                "{} gate needs equal ranks, got {source_rank} -> {target_rank}",
                variant.name()
            )));
        }
        Ok(Self {
            variant,
            source_rank,
            target_rank,
            fold: most_square_fold(source_rank),
            out_fold: most_square_fold(target_rank),
        })
    }

    pub fn of(gate: &Gate) -> Self {
        let (fold, out_fold) = match gate.kind {
            GateKind::Tensor { fold, out_fold, .. } => (fold, out_fold),
            _ => (
                most_square_fold(gate.source_rank()),
                most_square_fold(gate.target_rank()),
            ),
        };
        Self {
            variant: gate.variant(),
            source_rank: gate.source_rank(),
            target_rank: gate.target_rank(),
            fold,
            out_fold,
        }
    }

    pub fn params(&self) -> usize {
        let ((r0, r1), (q0, q1)) = (self.fold, self.out_fold);
        match self.variant {
            GateVariant::Identity => 0,
            GateVariant::Linear => 1,
            GateVariant::Tensor => q0 * r0 + r1 * q1,
            GateVariant::Dense => self.target_rank * self.source_rank,
        }
    }

    pub fn flops(&self, n: usize) -> u64 {
        let ((r0, r1), (q0, q1)) = (self.fold, self.out_fold);
        match self.variant {
            GateVariant::Identity => 0,
            GateVariant::Linear => CostModel::elementwise(n * self.source_rank),
            // (n, r0, r1) over r0, then (n, r1, r0') over r1
            GateVariant::Tensor => CostModel::contraction(&[n, r0, r1, q0]) + CostModel::contraction(&[n, r1, q0, q1]),
            GateVariant::Dense => CostModel::matmul(n, self.source_rank, self.target_rank),
        }
    }
}

pub fn gate_flops(gate: &GateShape, n: usize) -> u64 {
    gate.flops(n)
}

/// One linear position.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub id: String,
    pub shape: LayerShape,
    pub stream: Option<String>,
    pub trainable: usize,
    pub total: usize,
    pub flops: u64,
}

/// One pathway and its cost.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateRow {
    pub slot: String,
    pub source: String,
    pub target: String,
    pub gate: GateShape,
    pub trainable: bool,
    pub params: usize,
    pub norm: NormPlacement,
    pub norm_params: usize,
    pub gate_flops: u64,
    /// Adding the gated latent into the target.
    pub residual_flops: u64,
    /// Norm cost at the configured placement.
    pub norm_flops: u64,
    /// Residual plus a norm over the latent, `n·r + 8·n·r`.
    pub res_norm_latent: u64,
    /// Residual plus a norm over the layer output, `n·r + 8·n·d`.
    pub res_norm_output: u64,
}

impl GateRow {
    pub fn total_params(&self) -> usize {
        self.params + self.norm_params
    }

    pub fn total_flops(&self) -> u64 {
        self.gate_flops + self.residual_flops + self.norm_flops
    }
}

/// A parameter tensor outside any linear slot.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorRow {
    pub name: String,
    pub params: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AccountingReport {
    pub seq_len: usize,
    pub layers: Vec<LayerRow>,
    pub gates: Vec<GateRow>,
    pub tensors: Vec<TensorRow>,
    pub trainable_params: usize,
    pub total_params: usize,
    /// Gates plus pathway norms.
    pub lax_params: usize,
    pub base_params: usize,
    /// `lax_params / total_params`.
    pub overhead_ratio: f64,
    pub layer_flops: u64,
    /// Gates, residual adds and pathway norms.
    pub lax_flops: u64,
    /// `4·n²·d` per softmax block.
    pub attention_flops: u64,
    /// Block and final layer norms.
    pub norm_flops: u64,
    pub total_flops: u64,
    /// `lax_flops / total_flops`.
    pub flops_overhead_ratio: f64,
}

fn ratio(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

impl AccountingReport {
    fn finish(mut self) -> Self {
        let gate_train: usize = self
            .gates
            .iter()
            .map(|g| g.norm_params + if g.trainable { g.params } else { 0 })
            .sum();
        let loose_train: usize = self.tensors.iter().filter(|t| t.trainable).map(|t| t.params).sum();
        self.lax_params = self.gates.iter().map(GateRow::total_params).sum();
        self.trainable_params = self.layers.iter().map(|l| l.trainable).sum::<usize>() + gate_train + loose_train;
        self.total_params = self.layers.iter().map(|l| l.total).sum::<usize>()
            + self.lax_params
            + self.tensors.iter().map(|t| t.params).sum::<usize>();
        self.base_params = self.total_params - self.lax_params;
        self.overhead_ratio = ratio(self.lax_params as u64, self.total_params as u64);
        self.layer_flops = self.layers.iter().map(|l| l.flops).sum();
        self.lax_flops = self.gates.iter().map(GateRow::total_flops).sum();
        self.total_flops = self.layer_flops + self.lax_flops + self.attention_flops + self.norm_flops;
        self.flops_overhead_ratio = ratio(self.lax_flops, self.total_flops);
        self
    }

    pub fn layer(&self, id: &str) -> Option<&LayerRow> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Aligned text: one line per layer and pathway, then the totals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:<6} {:<10} {:>12} {:>12} {:>16}",
            "layer", "kind", "stream", "trainable", "total", "flops"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<22} {:<6} {:<10} {:>12} {:>12} {:>16}",
                l.id,
                l.shape.kind(),
                l.stream.as_deref().unwrap_or("-"),
                l.trainable,
                l.total,
                l.flops
            );
        }
        if !self.gates.is_empty() {
            let _ = writeln!(
                s,
                "\n{:<22} {:<14} {:<8} {:>9} {:>8} {:>7} {:>12} {:>14} {:>14}",
                "pathway", "route", "gate", "ranks", "params", "norm", "gate flops", "res+ln(r)", "res+ln(d)"
            );
            for g in &self.gates {
                let _ = writeln!(
                    s,
                    "{:<22} {:<14} {:<8} {:>9} {:>8} {:>7} {:>12} {:>14} {:>14}",
                    g.slot,
                    format!("{}>{}", g.source, g.target),
                    g.gate.variant.name(),
                    format!("{}>{}", g.gate.source_rank, g.gate.target_rank),
                    g.params,
                    g.norm_params,
                    g.gate_flops,
                    g.res_norm_latent,
                    g.res_norm_output
                );
            }
        }
        let _ = writeln!(s, "\nsequence length   {}", self.seq_len);
        let _ = writeln!(s, "trainable params  {}", self.trainable_params);
        let _ = writeln!(s, "total params      {}", self.total_params);
        let _ = writeln!(
            s,
            "lax params        {} ({:.4}%)",
            self.lax_params,
            100.0 * self.overhead_ratio
        );
        let _ = writeln!(s, "layer flops       {}", self.layer_flops);
        let _ = writeln!(s, "attention flops   {}", self.attention_flops);
        let _ = writeln!(s, "norm flops        {}", self.norm_flops);
        let _ = writeln!(
            s,
            "lax flops         {} ({:.4}%)",
            self.lax_flops,
            100.0 * self.flops_overhead_ratio
        );
        let _ = writeln!(s, "total flops       {}", self.total_flops);
        s
    }
}

/// Replays the slot wiring of the network builders on shapes.
struct Planner<'a> {
    lax: &'a LaxSpec,
    norm: NormPlacement,
    prev: BTreeMap<String, usize>,
    n: usize,
}

impl<'a> Planner<'a> {
    fn new(lax: &'a LaxSpec, default_norm: NormPlacement, n: usize) -> Self {
        Self {
            lax,
            norm: lax.norm_or(default_norm),
            prev: BTreeMap::new(),
            n,
        }
    }

    fn plain(&self, report: &mut AccountingReport, id: &str, shape: LayerShape) {
        report.layers.push(LayerRow {
            id: id.to_string(),
            trainable: shape.trainable_params(),
            total: shape.total_params(),
            flops: shape.flops(self.n),
            shape,
            stream: None,
        });
    }

    fn pathway(
        &self,
        slot: &str,
        source: &str,
        target: &str,
        gate: GateShape,
        norm: NormPlacement,
        d_out: usize,
    ) -> GateRow {
        let n = self.n;
        let r = gate.target_rank;
        let norm_dim = match norm {
            NormPlacement::Off => 0,
            NormPlacement::Latent => r,
            NormPlacement::Output => d_out,
        };
        let residual = CostModel::elementwise(n * r);
        GateRow {
            slot: slot.to_string(),
            source: source.to_string(),
            target: target.to_string(),
            gate,
            trainable: self.lax.train_gates,
            params: gate.params(),
            norm,
            norm_params: 2 * norm_dim,
            gate_flops: gate.flops(n),
            residual_flops: residual,
            norm_flops: CostModel::layer_norm(n, norm_dim),
            res_norm_latent: residual + CostModel::layer_norm(n, r),
            res_norm_output: residual + CostModel::layer_norm(n, d_out),
        }
    }

    fn slot(&mut self, report: &mut AccountingReport, id: &str, shape: LayerShape, stream: &str) -> Result<()> {
        let carried = shape.latent_rank().filter(|_| self.lax.carries(stream));
        self.plain(report, id, shape.clone());
        let Some(rank) = carried else {
            return Ok(());
        };
        report.layers.last_mut().expect("row just pushed").stream = Some(stream.to_string());
        if let Some(prev) = self.prev.insert(stream.to_string(), rank) {
            let gate = GateShape::new(self.lax.gate_for(stream), prev, rank)?;
            let row = self.pathway(id, "latent", "latent", gate, self.norm, shape.d_out());
            report.gates.push(row);
        }
        if let (
            true,
            LayerShape::Tt {
                out_dims,
                in_dims,
                ranks,
            },
        ) = (self.lax.intra_tt, &shape)
        {
            let k = out_dims.len();
            for j in 1..k {
                // in_j = [d_k, .., d_{2k-1-j}, r_{2k-j}], out_{k-j} = [d_{k-1}, .., d_j, r_j]
                let mut src: Vec<usize> = in_dims[..k - j].to_vec();
                src.push(ranks[2 * k - j]);
                let mut dst: Vec<usize> = out_dims[j..].iter().rev().copied().collect();
                dst.push(ranks[j]);
                let compatible = match self.lax.intra_gate {
                    GateVariant::Identity | GateVariant::Linear => src == dst,
                    GateVariant::Tensor | GateVariant::Dense => src[..src.len() - 1] == dst[..dst.len() - 1],
                };
                let (sl, tl) = (format!("in_{j}"), format!("out_{}", k - j));
                if !compatible {
                    return Err(LaxError::Pathway {
                        source_label: sl,
                        source_shape: src,
                        target_label: tl,
                        target_shape: dst,
                    });
                }
                let gate = GateShape::new(self.lax.intra_gate, src.iter().product(), dst.iter().product())?;
                let row = self.pathway(id, &sl, &tl, gate, NormPlacement::Off, shape.d_out());
                report.gates.push(row);
            }
        }
        Ok(())
    }
}

fn tensor(report: &mut AccountingReport, name: &str, params: usize, trainable: bool) {
    report.tensors.push(TensorRow {
        name: name.to_string(),
        params,
        trainable,
    });
}

const LORA_ROLES: [&str; 7] = ["q", "k", "v", "qkv", "o", "up", "down"];

fn check_lora(spec: &ModelSpec, lora: &LoraSpec) -> Result<()> {
    if lora.rank == 0 {
        return Err(LaxError::Config("adapter rank must be >= 1".into()));
    }
    if let Some(bad) = lora.targets.iter().find(|t| !LORA_ROLES.contains(&t.as_str())) {
        return Err(LaxError::Config(format!("unknown adapter target {bad:?}")));
    }
    let present: &[&str] = match spec.block.qkv_layout {
        QkvLayout::Fused => &["qkv", "o", "up", "down"],
        QkvLayout::Separate => &["q", "k", "v", "o", "up", "down"],
    };
    if let Some(missing) = lora.targets.iter().find(|t| !present.contains(&t.as_str())) {
        return Err(LaxError::Config(format!(
            "adapter target {missing:?} does not exist with this attention layout"
        )));
    }
    Ok(())
}

fn plan_model(spec: &ModelSpec, lora: Option<&LoraSpec>, n: usize) -> Result<AccountingReport> {
    spec.validate()?;
    if let Some(l) = lora {
        check_lora(spec, l)?;
    }
    let frozen = lora.is_some();
    let b = &spec.block;
    let d = b.width;
    let t = spec.seq_len();
    let mut report = AccountingReport {
        seq_len: n,
        ..AccountingReport::default()
    };
    let mut base = Planner::new(&spec.lax, NormPlacement::Latent, n);
    let off = LaxSpec::default();
    let mut adapters = Planner::new(lora.map_or(&off, |l| &l.lax), NormPlacement::Off, n);
    match spec.input {
        InputKind::Tokens { vocab, .. } => {
            tensor(&mut report, "embed.tok", vocab * d, !frozen);
            tensor(&mut report, "embed.pos", t * d, !frozen);
        }
        InputKind::Patches {
            patch_dim, cls_token, ..
        } => {
            let proj = LayerShape::Dense {
                d_in: patch_dim,
                d_out: d,
                bias: true,
                frozen,
            };
            base.plain(&mut report, "embed.patch", proj);
            if cls_token {
                tensor(&mut report, "embed.cls", d, !frozen);
            }
            tensor(&mut report, "embed.pos", t * d, !frozen);
        }
    }
    // (slot, adapter role, spec, d_in, d_out) in binding order
    let positions = {
        let mut v: Vec<(&str, &str, &LayerSpec, usize, usize)> = match b.qkv_layout {
            QkvLayout::Fused => vec![("qkv", "qkv", &b.qkv, d, 3 * d)],
            QkvLayout::Separate => vec![
                ("q", "q", &b.qkv, d, d),
                ("k", "k", &b.qkv, d, d),
                ("v", "v", &b.qkv, d, d),
            ],
        };
        v.push(("proj", "o", &b.proj, d, d));
        v.push(("mlp_up", "up", &b.mlp_up, d, b.hidden()));
        v.push(("mlp_down", "down", &b.mlp_down, b.hidden(), d));
        v
    };
    for i in 0..spec.depth {
        tensor(&mut report, &format!("blocks.{i}.ln1.gain"), d, !frozen);
        tensor(&mut report, &format!("blocks.{i}.ln1.bias"), d, !frozen);
        for (name, role, layer, d_in, d_out) in &positions {
            if *name == "mlp_up" {
                tensor(&mut report, &format!("blocks.{i}.ln2.gain"), d, !frozen);
                tensor(&mut report, &format!("blocks.{i}.ln2.bias"), d, !frozen);
            }
            let id = format!("blocks.{i}.{name}");
            let shape = LayerShape::from_spec(layer, &id, *d_in, *d_out)?;
            match lora {
                None => base.slot(&mut report, &id, shape, name)?,
                Some(l) => {
                    if !matches!(shape, LayerShape::Dense { .. }) {
                        return Err(LaxError::Config(format!("{id}: adapters need a dense base layer")));
                    }
                    if l.targets.iter().any(|t| t == role) {
                        let adapter = LayerShape::Lora {
                            d_in: *d_in,
                            d_out: *d_out,
                            rank: l.rank,
                        };
                        adapters.slot(&mut report, &id, adapter, &format!("lora:{role}"))?;
                    } else {
                        let frozen = LayerShape::Dense {
                            d_in: *d_in,
                            d_out: *d_out,
                            bias: false,
                            frozen: true,
                        };
                        adapters.plain(&mut report, &id, frozen);
                    }
                }
            }
        }
    }
    tensor(&mut report, "final_ln.gain", d, !frozen);
    tensor(&mut report, "final_ln.bias", d, !frozen);
    let classes = match spec.head {
        HeadKind::Lm { vocab } => vocab,
        HeadKind::Classify { classes, .. } => classes,
    };
    let head = LayerShape::Dense {
        d_in: d,
        d_out: classes,
        bias: true,
        frozen,
    };
    base.plain(&mut report, "head", head);
    if b.attention == AttentionKind::Softmax {
        report.attention_flops = spec.depth as u64 * 4 * (n as u64).pow(2) * d as u64;
    }
    report.norm_flops = (2 * spec.depth as u64 + 1) * CostModel::layer_norm(n, d);
    Ok(report.finish())
}

fn plan_chain(spec: &ChainSpec, n: usize) -> Result<AccountingReport> {
    if spec.width == 0 || spec.depth == 0 {
        return Err(LaxError::Config("chain needs width and depth >= 1".into()));
    }
    let mut report = AccountingReport {
        seq_len: n,
        ..AccountingReport::default()
    };
    let mut planner = Planner::new(&spec.lax, NormPlacement::Latent, n);
    for i in 0..spec.depth {
        let id = format!("layers.{i}");
        let shape = LayerShape::from_spec(&spec.layer, &id, spec.width, spec.width)?;
        planner.slot(&mut report, &id, shape, "chain")?;
    }
    Ok(report.finish())
}

/// Parameter and FLOP report for `spec`, optionally wrapped with adapters,
/// at `seq_len` rows per forward pass. Fails exactly where building the
/// network would.
pub fn model_overhead(spec: &NetSpec, lora: Option<&LoraSpec>, seq_len: usize) -> Result<AccountingReport> {
    match (spec, lora) {
        (NetSpec::Transformer(m), _) => plan_model(m, lora, seq_len),
        (NetSpec::Chain(c), None) => plan_chain(c, seq_len),
        (NetSpec::Chain(_), Some(_)) => Err(LaxError::Config("adapters wrap transformers only".into())),
    }
}

/// ViT-B/16 at 224 px: 12 blocks of width 768, 12 heads, separate q/k/v,
/// every block position a rank-`rank` SVD layer, 1000 classes.
pub fn vit_base(rank: usize, lax: LaxSpec) -> ModelSpec {
    ModelSpec {
        input: InputKind::Patches {
            patch_dim: 16 * 16 * 3,
            num_patches: 14 * 14,
            cls_token: true,
        },
        head: HeadKind::Classify {
            classes: 1000,
            readout: Readout::First,
        },
        depth: 12,
        block: BlockSpec {
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            qkv_layout: QkvLayout::Separate,
            qkv: LayerSpec::svd(rank),
            proj: LayerSpec::svd(rank),
            mlp_up: LayerSpec::svd(rank),
            mlp_down: LayerSpec::svd(rank),
            attention: AttentionKind::Softmax,
        },
        lax,
        seed: 0,
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};
use crate::lax::{GateVariant, NormPlacement};
use crate::layers::{ColaLayer, DenseLinear, Linear, SvdLayer, TtLayer};
use crate::numerics::{Activation, Init};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    #[default]
    Dense,
    Svd,
    Cola,
    Tt,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtShape {
    pub out_dims: Vec<usize>,
    pub in_dims: Vec<usize>,
    pub ranks: Vec<usize>,
}

/// How one linear position is parameterized.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// CoLA only.
    #[serde(default)]
    pub activation: Activation,
    /// TT only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tt: Option<TtShape>,
}

impl LayerSpec {
    pub fn dense() -> Self {
        Self::default()
    }

    pub fn svd(rank: usize) -> Self {
        Self {
            kind: LayerKind::Svd,
            rank: Some(rank),
            ..Self::default()
        }
    }

    pub fn cola(rank: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Cola,
            rank: Some(rank),
            activation,
            tt: None,
        }
    }

    pub fn tt(out_dims: &[usize], in_dims: &[usize], ranks: &[usize]) -> Self {
        Self {
            kind: LayerKind::Tt,
            rank: None,
            activation: Activation::default(),
            tt: Some(TtShape {
                out_dims: out_dims.to_vec(),
                in_dims: in_dims.to_vec(),
                ranks: ranks.to_vec(),
            }),
        }
    }

    fn need_rank(&self, what: &str) -> Result<usize> {
        match self.rank {
            Some(r) if r > 0 => Ok(r),
            _ => Err(LaxError::Config(format!(
                "{what}: {:?} layer needs a positive rank",
                self.kind
            ))),
        }
    }

    /// Builds the layer for `d_in -> d_out`; `name` keys the initializer.
    pub fn build(&self, init: &Init, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(match self.kind {
            LayerKind::Dense => Linear::Dense(DenseLinear::init(init, name, d_in, d_out, false)),
            LayerKind::Svd => Linear::Svd(SvdLayer::init(init, name, d_in, d_out, self.need_rank(name)?)),
            LayerKind::Cola => Linear::Cola(ColaLayer::init(
                init,
                name,
                d_in,
                d_out,
                self.need_rank(name)?,
                self.activation,
            )),
            LayerKind::Tt => {
                let s = self
                    .tt
                    .as_ref()
                    .ok_or_else(|| LaxError::Config(format!("{name}: tt layer needs a \"tt\" shape")))?;
                let l = TtLayer::init(init, name, &s.out_dims, &s.in_dims, &s.ranks)
                    .map_err(|e| LaxError::Config(format!("{name}: {e}")))?;
                if l.d_in() != d_in || l.d_out() != d_out {
                    return Err(LaxError::Config(format!(
                        "{name}: tt factors give {}x{}, position needs {d_out}x{d_in}",
                        l.d_out(),
                        l.d_in()
                    )));
                }
                Linear::Tt(l)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QkvLayout {
    /// One `d -> 3d` projection on stream `qkv`.
    #[default]
    Fused,
    /// Three `d -> d` projections on streams `q`, `k`, `v`.
    Separate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Softmax,
    /// Attention output is the value projection itself.
    Bypass,
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub qkv_layout: QkvLayout,
    pub qkv: LayerSpec,
    /// Attention output projection.
    #[serde(default)]
    pub proj: LayerSpec,
    pub mlp_up: LayerSpec,
    pub mlp_down: LayerSpec,
    #[serde(default)]
    pub attention: AttentionKind,
}

impl BlockSpec {
    /// Same low-rank spec at every position except the output projection.
    pub fn uniform(width: usize, heads: usize, layer: LayerSpec) -> Self {
        Self {
            width,
            heads,
            mlp_ratio: 4,
            qkv_layout: QkvLayout::Fused,
            qkv: layer.clone(),
            proj: LayerSpec::dense(),
            mlp_up: layer.clone(),
            mlp_down: layer,
            attention: AttentionKind::Softmax,
        }
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }
}

fn default_beta() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Latent-crossing wiring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaxSpec {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub gate: GateVariant,
    /// Per-stream gate overrides.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gates: BTreeMap<String, GateVariant>,
    /// Streams that carry pathways; all streams when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub streams: Option<Vec<String>>,
    /// Latent norm for pre-training, off for adapters when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormPlacement>,
    /// Intra-layer pathways inside TT layers.
    #[serde(default)]
    pub intra_tt: bool,
    #[serde(default)]
    pub intra_gate: GateVariant,
    /// Initial `beta` of linear gates.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_true")]
    pub train_gates: bool,
}

impl Default for LaxSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            gate: GateVariant::Identity,
            gates: BTreeMap::new(),
            streams: None,
            norm: None,
            intra_tt: false,
            intra_gate: GateVariant::Identity,
            beta: 1.0,
            train_gates: true,
        }
    }
}

impl LaxSpec {
    pub fn with_gate(gate: GateVariant) -> Self {
        Self {
            enabled: true,
            gate,
            ..Self::default()
        }
    }

    pub fn norm_or(&self, fallback: NormPlacement) -> NormPlacement {
        self.norm.unwrap_or(fallback)
    }

    /// Streams default to every position except the attention output
    /// projection.
    pub fn carries(&self, stream: &str) -> bool {
        self.enabled
            && match &self.streams {
                Some(s) => s.iter().any(|x| x == stream),
                None => stream != "proj",
            }
    }

    pub fn gate_for(&self, stream: &str) -> GateVariant {
        self.gates.get(stream).copied().unwrap_or(self.gate)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputKind {
    Tokens {
        vocab: usize,
        max_len: usize,
    },
    /// Pre-flattened patches `[batch·num_patches, patch_dim]`.
    Patches {
        patch_dim: usize,
        num_patches: usize,
        #[serde(default)]
        cls_token: bool,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Last,
    First,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadKind {
    /// Next-token logits at every position, causal attention.
    Lm { vocab: usize },
    /// One label per sequence read from a single position.
    Classify {
        classes: usize,
        #[serde(default)]
        readout: Readout,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputKind,
    pub head: HeadKind,
    pub depth: usize,
    pub block: BlockSpec,
    #[serde(default)]
    pub lax: LaxSpec,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(LaxError::Config(m));
        let b = &self.block;
        if self.depth == 0 {
            return cfg("depth must be >= 1".into());
        }
        if b.width == 0 || b.heads == 0 || !b.width.is_multiple_of(b.heads) {
            return cfg(format!(
                "width {} must be a positive multiple of heads {}",
                b.width, b.heads
            ));
        }
        if b.mlp_ratio == 0 {
            return cfg("mlp_ratio must be >= 1".into());
        }
        match self.input {
            InputKind::Tokens { vocab, max_len } if vocab == 0 || max_len == 0 => {
                return cfg("token input needs vocab and max_len >= 1".into())
            }
            InputKind::Patches {
                patch_dim, num_patches, ..
            } if patch_dim == 0 || num_patches == 0 => {
                return cfg("patch input needs patch_dim and num_patches >= 1".into())
            }
            _ => {}
        }
        match self.head {
            HeadKind::Lm { vocab: 0 } => cfg("lm head needs vocab >= 1".into()),
            HeadKind::Classify { classes: 0, .. } => cfg("classifier needs classes >= 1".into()),
            _ => Ok(()),
        }
    }

    /// Sequence length seen by the blocks.
    pub fn seq_len(&self) -> usize {
        match self.input {
            InputKind::Tokens { max_len, .. } => max_len,
            InputKind::Patches {
                num_patches, cls_token, ..
            } => num_patches + cls_token as usize,
        }
    }
}

/// Stack of same-shape linear slots on one stream, used for regression
/// and gradient checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub width: usize,
    pub depth: usize,
    pub layer: LayerSpec,
    /// Applied between slots, not after the last.
    #[serde(default = "identity_act")]
    pub activation: Activation,
    #[serde(default)]
    pub lax: LaxSpec,
    pub seed: u64,
}

fn identity_act() -> Activation {
    Activation::Identity
}

/// Adapter wrapping of a frozen model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    /// `2·rank` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Roles among `q`, `k`, `v`, `qkv`, `o`, `up`, `down`.
    pub targets: Vec<String>,
    #[serde(default)]
    pub lax: LaxSpec,
    pub seed: u64,
}

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numerics::{Binder, Init, Tape, Tensor, Var};

/// Gate family, as named in configs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateVariant {
    #[default]
    Identity,
    Linear,
    Tensor,
    Dense,
}

impl GateVariant {
    pub const ALL: [GateVariant; 4] = [
        GateVariant::Identity,
        GateVariant::Linear,
        GateVariant::Tensor,
        GateVariant::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateVariant::Identity => "identity",
            GateVariant::Linear => "linear",
            GateVariant::Tensor => "tensor",
            GateVariant::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GateKind {
    Identity,
    /// Scalar `beta`, stored as a `[1]` tensor.
    Linear {
        beta: Tensor,
    },
    /// `c0[1, r0', r0]` and `c1[r1, r1', 1]`; `fold = (r0, r1)` splits the
    /// source latent and `out_fold = (r0', r1')` the target.
    Tensor {
        c0: Tensor,
        c1: Tensor,
        fold: (usize, usize),
        out_fold: (usize, usize),
    },
    /// `g[r_target, r_source]`.
    Dense {
        g: Tensor,
    },
}

/// Linear map applied to an incoming latent before it is added.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub kind: GateKind,
    source_rank: usize,
    target_rank: usize,
    pub trainable: bool,
}

/// Factor pair `(a, b)` with `a·b = r` and `|a - b|` minimal, smaller `a`
/// first.
pub fn most_square_fold(r: usize) -> (usize, usize) {
    let mut best = (1, r);
    for a in 1..=r {
        if a * a > r {
            break;
        }
        if r.is_multiple_of(a) {
            best = (a, r / a);
        }
    }
    best
}

impl Gate {
    pub fn identity(rank: usize) -> Self {
        Self {
            kind: GateKind::Identity,
            source_rank: rank,
            target_rank: rank,
            trainable: true,
        }
    }

    pub fn linear(rank: usize, beta: f64) -> Self {
        Self {
            kind: GateKind::Linear {
                beta: Tensor::scalar(beta),
            },
            source_rank: rank,
            target_rank: rank,
            trainable: true,
        }
    }

    pub fn tensor(c0: Tensor, c1: Tensor) -> Result<Self> {
        let (s0, s1) = (c0.shape().to_vec(), c1.shape().to_vec());
        if s0.len() != 3 || s0[0] != 1 || s1.len() != 3 || s1[2] != 1 {
            return dim_err(format!(
                "tensor gate cores must be [1, r0', r0] and [r1, r1', 1], got {s0:?} and {s1:?}"
            ));
        }
        let fold = (s0[2], s1[0]);
        let out_fold = (s0[1], s1[1]);
        Ok(Self {
            kind: GateKind::Tensor { c0, c1, fold, out_fold },
            source_rank: fold.0 * fold.1,
            target_rank: out_fold.0 * out_fold.1,
            trainable: true,
        })
    }

    pub fn dense(g: Tensor) -> Result<Self> {
        if g.ndim() != 2 {
            return dim_err(format!("dense gate must be a matrix, got {:?}", g.shape()));
        }
        let (t, s) = (g.shape()[0], g.shape()[1]);
        Ok(Self {
            kind: GateKind::Dense { g },
            source_rank: s,
            target_rank: t,
            trainable: true,
        })
    }

    /// Default-initialized gate of the given family. Identity needs equal
    /// ranks; Linear starts at `beta = 1`; Dense starts at the identity
    /// (zero-padded when the ranks differ); Tensor cores are Gaussian.
    pub fn init(init: &Init, name: &str, variant: GateVariant, source: usize, target: usize) -> Result<Self> {
        let same = || {
            if source == target {
                Ok(())
            } else {
                dim_err(format!(
                    "{} gate needs equal ranks, got {source} -> {target}",
                    variant.name()
                ))
            }
        };
        match variant {
            GateVariant::Identity => same().map(|_| Gate::identity(source)),
            GateVariant::Linear => same().map(|_| Gate::linear(source, 1.0)),
            GateVariant::Tensor => {
                let (r0, r1) = most_square_fold(source);
                let (q0, q1) = most_square_fold(target);
                let c0 = init.normal(&format!("{name}.c0"), &[1, q0, r0], 1.0 / r0 as f64);
                let c1 = init.normal(&format!("{name}.c1"), &[r1, q1, 1], 1.0 / r1 as f64);
                Gate::tensor(c0, c1)
            }
            GateVariant::Dense => Gate::dense(Tensor::from_fn(&[target, source], |i| {
                if i / source == i % source {
                    1.0
                } else {
                    0.0
                }
            })),
        }
    }

    pub fn variant(&self) -> GateVariant {
        match self.kind {
            GateKind::Identity => GateVariant::Identity,
            GateKind::Linear { .. } => GateVariant::Linear,
            GateKind::Tensor { .. } => GateVariant::Tensor,
            GateKind::Dense { .. } => GateVariant::Dense,
        }
    }

    pub fn source_rank(&self) -> usize {
        self.source_rank
    }

    pub fn target_rank(&self) -> usize {
        self.target_rank
    }

    pub fn param_count(&self) -> usize {
        match &self.kind {
            GateKind::Identity => 0,
            GateKind::Linear { .. } => 1,
            GateKind::Tensor {
                fold: (r0, r1),
                out_fold: (q0, q1),
                ..
            } => q0 * r0 + r1 * q1,
            GateKind::Dense { .. } => self.source_rank * self.target_rank,
        }
    }

    /// Turns the gate into a map with exactly zero output. Identity gates
    /// become `Linear` with `beta = 0`.
    pub fn set_zero(&mut self) {
        match &mut self.kind {
            GateKind::Identity => {
                self.kind = GateKind::Linear {
                    beta: Tensor::scalar(0.0),
                }
            }
            GateKind::Linear { beta } => *beta = Tensor::scalar(0.0),
            GateKind::Tensor { c0, c1, .. } => {
                *c0 = Tensor::zeros(c0.shape());
                *c1 = Tensor::zeros(c1.shape());
            }
            GateKind::Dense { g } => *g = Tensor::zeros(g.shape()),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> Vec<Var> {
        let t = self.trainable;
        match &self.kind {
            GateKind::Identity => Vec::new(),
            GateKind::Linear { beta } => vec![b.bind("beta", beta, t)],
            GateKind::Tensor { c0, c1, .. } => vec![b.bind("c0", c0, t), b.bind("c1", c1, t)],
            GateKind::Dense { g } => vec![b.bind("g", g, t)],
        }
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match &mut self.kind {
            GateKind::Identity => {}
            GateKind::Linear { beta } => out.push(beta),
            GateKind::Tensor { c0, c1, .. } => {
                out.push(c0);
                out.push(c1);
            }
            GateKind::Dense { g } => out.push(g),
        }
    }

    /// Applies the gate to `h[batch, r_source]`.
    pub fn apply(&self, tape: &mut Tape, vars: &[Var], h: Var) -> Result<Var> {
        let s = tape.shape(h).to_vec();
        if s.len() != 2 || s[1] != self.source_rank {
            return dim_err(format!("gate expects latent [batch, {}], got {s:?}", self.source_rank));
        }
        let n = s[0];
        match &self.kind {
            GateKind::Identity => Ok(h),
            GateKind::Linear { .. } => tape.scalar_mul(vars[0], h),
            GateKind::Tensor {
                fold: (r0, r1),
                out_fold: (q0, q1),
                ..
            } => {
                let folded = tape.reshape(h, &[n, *r0, *r1])?;
                let c0 = tape.reshape(vars[0], &[*q0, *r0])?;
                let c1 = tape.reshape(vars[1], &[*r1, *q1])?;
                // (n, r0, r1) x c0 -> (n, r1, r0') x c1 -> (n, r0', r1')
                let t = tape.contract(folded, c0, 1, 1)?;
                let t = tape.contract(t, c1, 1, 0)?;
                tape.reshape(t, &[n, q0 * q1])
            }
            GateKind::Dense { .. } => tape.linear(h, vars[0]),
        }
    }

    /// Equivalent `[r_target, r_source]` matrix, probed with basis vectors.
    pub fn materialize(&self) -> Result<Tensor> {
        gate_apply(self, &Tensor::eye(self.source_rank))?.t()
    }
}

/// Gate output for a concrete latent.
pub fn gate_apply(gate: &Gate, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = {
        let mut b = Binder::new(&mut tape);
        b.push("gate");
        let mut frozen = gate.clone();
        frozen.trainable = false;
        frozen.bind(&mut b)
    };
    let h = tape.constant(h.clone());
    let y = gate.apply(&mut tape, &vars, h)?;
    Ok(tape.value(y).clone())
}

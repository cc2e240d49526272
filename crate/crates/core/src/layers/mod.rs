//! Linear layers: the dense baseline and the four low-rank parameterizations.
//!
//! A low-rank layer runs in two phases so that latent crossing can sit in
//! between: [`Linear::down`] produces the bottleneck latent, and
//! [`Linear::up`] maps a (possibly fused) latent back to the output space.

mod blob;
mod cola;
mod dense;
mod lora;
mod svd;
mod tt;

pub use blob::{read_layer, read_tensor, write_layer, write_tensor, LayerTag};
pub use cola::{cola_forward, ColaLayer};
pub use dense::{dense_forward, DenseLinear};
pub use lora::{lora_forward, LoraAdapter};
pub use svd::{svd_forward, SvdLayer};
pub(crate) use tt::validate as validate_tt;
pub use tt::{tt_forward, tt_to_dense, TtLayer};

use crate::error::{dim_err, Result};
use crate::numerics::{Binder, Tape, Tensor, Var};

/// One named intermediate result of a layer's forward pass.
#[derive(Clone, Debug)]
pub struct Stage {
    pub label: String,
    /// Value flattened to `[batch, features]`.
    pub var: Var,
    /// Logical shape including the batch axis.
    pub shape: Vec<usize>,
}

impl Stage {
    pub fn features(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Output of the down-projection phase.
#[derive(Clone, Debug)]
pub struct Down {
    /// Bottleneck latent `[batch, r]`.
    pub latent: Var,
    /// Every intermediate, in contraction order. For matrix factorizations
    /// this is the single entry `h`; for TT it is `in_1..in_k`.
    pub stages: Vec<Stage>,
}

/// Bottleneck features recorded from one forward pass.
#[derive(Clone, Debug)]
pub struct LatentRecord {
    pub layer_id: String,
    pub stream: Option<String>,
    pub latents: Vec<(String, Tensor)>,
}

impl LatentRecord {
    pub fn get(&self, label: &str) -> Option<&Tensor> {
        self.latents.iter().find(|(l, _)| l == label).map(|(_, t)| t)
    }
}

/// Hook invoked after each output-phase stage of a TT layer with
/// `(tape, stage index j, stage)`; it returns the value to continue from.
pub type StageHook<'h> = dyn FnMut(&mut Tape, usize, &Stage) -> Result<Var> + 'h;

/// Tagged union over every linear parameterization.
#[derive(Clone, Debug, PartialEq)]
pub enum Linear {
    Dense(DenseLinear),
    Svd(SvdLayer),
    Cola(ColaLayer),
    Tt(TtLayer),
    Lora(LoraAdapter),
}

impl Linear {
    pub fn d_in(&self) -> usize {
        match self {
            Linear::Dense(l) => l.d_in(),
            Linear::Svd(l) => l.d_in(),
            Linear::Cola(l) => l.d_in(),
            Linear::Tt(l) => l.d_in(),
            Linear::Lora(l) => l.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Linear::Dense(l) => l.d_out(),
            Linear::Svd(l) => l.d_out(),
            Linear::Cola(l) => l.d_out(),
            Linear::Tt(l) => l.d_out(),
            Linear::Lora(l) => l.d_out(),
        }
    }

    /// Width of the bottleneck latent; `None` for dense layers.
    pub fn latent_rank(&self) -> Option<usize> {
        match self {
            Linear::Dense(_) => None,
            Linear::Svd(l) => Some(l.rank()),
            Linear::Cola(l) => Some(l.rank()),
            Linear::Tt(l) => Some(l.mid_rank()),
            Linear::Lora(l) => Some(l.rank()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Linear::Dense(_) => "dense",
            Linear::Svd(_) => "svd",
            Linear::Cola(_) => "cola",
            Linear::Tt(_) => "tt",
            Linear::Lora(_) => "lora",
        }
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        match self {
            Linear::Dense(l) if l.frozen => 0,
            Linear::Dense(l) => l.param_count(),
            Linear::Svd(l) => l.param_count(),
            Linear::Cola(l) => l.param_count(),
            Linear::Tt(l) => l.param_count(),
            Linear::Lora(l) => l.param_count(),
        }
    }

    /// Parameter count including frozen weights.
    pub fn total_param_count(&self) -> usize {
        match self {
            Linear::Lora(l) => l.total_param_count(),
            Linear::Dense(l) => l.param_count(),
            other => other.param_count(),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> Vec<Var> {
        match self {
            Linear::Dense(l) => l.bind(b),
            Linear::Svd(l) => l.bind(b),
            Linear::Cola(l) => l.bind(b),
            Linear::Tt(l) => l.bind(b),
            Linear::Lora(l) => l.bind(b),
        }
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Linear::Dense(l) => l.tensors_mut(out),
            Linear::Svd(l) => l.tensors_mut(out),
            Linear::Cola(l) => l.tensors_mut(out),
            Linear::Tt(l) => l.tensors_mut(out),
            Linear::Lora(l) => l.tensors_mut(out),
        }
    }

    /// Freezes every parameter of a dense layer. Other layer types keep
    /// their own trainability rules.
    pub fn set_frozen(&mut self, frozen: bool) {
        if let Linear::Dense(l) = self {
            l.frozen = frozen;
        }
    }

    /// Down-projection; `None` for dense layers, which have no bottleneck.
    pub fn down(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Option<Down>> {
        check_input(tape, x, self.d_in())?;
        Ok(match self {
            Linear::Dense(_) => None,
            Linear::Svd(l) => Some(l.down(tape, vars, x)?),
            Linear::Cola(l) => Some(l.down(tape, vars, x)?),
            Linear::Tt(l) => Some(l.down(tape, vars, x)?),
            Linear::Lora(l) => Some(l.down(tape, vars, x)?),
        })
    }

    /// Up-projection of the latent `z`. For TT layers `hook` sees every
    /// output-phase stage; the returned stages are `out_1..out_k`.
    pub fn up(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        z: Var,
        hook: Option<&mut StageHook<'_>>,
    ) -> Result<(Var, Vec<Stage>)> {
        match self {
            Linear::Dense(_) => dim_err("dense layers have no up-projection"),
            Linear::Svd(l) => Ok((l.up(tape, vars, z)?, Vec::new())),
            Linear::Cola(l) => Ok((l.up(tape, vars, z)?, Vec::new())),
            Linear::Tt(l) => l.up(tape, vars, z, hook),
            Linear::Lora(l) => Ok((l.up(tape, vars, x, z)?, Vec::new())),
        }
    }

    /// Plain forward pass with no latent crossing.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        match self {
            Linear::Dense(l) => {
                check_input(tape, x, l.d_in())?;
                l.forward(tape, vars, x)
            }
            other => {
                let down = other.down(tape, vars, x)?.expect("low-rank layer");
                Ok(other.up(tape, vars, x, down.latent, None)?.0)
            }
        }
    }

    /// Dense matrix `[d_out, d_in]` equivalent to this layer (CoLA only
    /// when its activation is the identity).
    pub fn to_dense(&self) -> Result<Tensor> {
        use crate::numerics::ops::{add, matmul, scale};
        match self {
            Linear::Dense(l) => Ok(l.w.clone()),
            Linear::Svd(l) => matmul(&l.b, &l.a),
            Linear::Cola(l) => {
                if l.activation != crate::numerics::Activation::Identity {
                    return dim_err("a CoLA layer with a nonlinearity has no dense equivalent");
                }
                matmul(&l.b, &l.a)
            }
            Linear::Tt(l) => tt_to_dense(l),
            Linear::Lora(l) => add(&l.w0, &scale(&matmul(&l.b, &l.a)?, l.scaling())),
        }
    }
}

pub(crate) fn check_input(tape: &Tape, x: Var, d_in: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != d_in {
        return dim_err(format!("layer expects input [batch, {d_in}], got {s:?}"));
    }
    Ok(())
}

/// Runs `f` on a scratch tape with `layer` bound as constants and returns
/// the concrete tensors it selects.
pub(crate) fn eval_pure<T>(
    layer: &Linear,
    x: &Tensor,
    f: impl FnOnce(&mut Tape, &[Var], Var) -> Result<T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let vars = {
        let mut b = Binder::new(&mut tape);

        layer.bind(&mut b)
    };
    let x = tape.constant(x.clone());
    f(&mut tape, &vars, x)
}

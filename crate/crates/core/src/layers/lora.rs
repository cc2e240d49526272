use super::svd::latent_down;
use super::{check_input, eval_pure, Down, Linear};
use crate::error::{dim_err, Result};
use crate::numerics::{Binder, Init, Tape, Tensor, Var};

/// Frozen `W0` plus the trainable delta `(alpha / r)·B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub w0: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(w0: Tensor, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let ok = w0.ndim() == 2
            && a.ndim() == 2
            && b.ndim() == 2
            && a.shape()[1] == w0.shape()[1]
            && b.shape()[0] == w0.shape()[0]
            && b.shape()[1] == a.shape()[0];
        if !ok {
            return dim_err(format!(
                "LoRA shapes disagree: W0 {:?}, A {:?}, B {:?}",
                w0.shape(),
                a.shape(),
                b.shape()
            ));
        }
        Ok(Self { w0, a, b, alpha })
    }

    /// `A ~ N(0, 1/d_in)`, `B = 0`, so the adapter starts as a zero delta.
    pub fn init(init: &Init, name: &str, w0: Tensor, rank: usize, alpha: f64) -> Self {
        let (d_out, d_in) = (w0.shape()[0], w0.shape()[1]);
        Self {
            a: init.normal(&format!("{name}.a"), &[rank, d_in], 1.0 / d_in as f64),
            b: Tensor::zeros(&[d_out, rank]),
            w0,
            alpha,
        }
    }

    /// Default scale `alpha = 2r`.
    pub fn default_alpha(rank: usize) -> f64 {
        2.0 * rank as f64
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.d_in() + self.d_out())
    }

    pub fn total_param_count(&self) -> usize {
        self.param_count() + self.w0.len()
    }

    pub(crate) fn bind(&self, b: &mut Binder) -> Vec<Var> {
        vec![
            b.bind("w0", &self.w0, false),
            b.bind("a", &self.a, true),
            b.bind("b", &self.b, true),
        ]
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w0);
        out.push(&mut self.a);
        out.push(&mut self.b);
    }

    pub(crate) fn down(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Down> {
        let h = tape.linear(x, vars[1])?;
        Ok(latent_down(tape, h))
    }

    pub(crate) fn up(&self, tape: &mut Tape, vars: &[Var], x: Var, z: Var) -> Result<Var> {
        let base = tape.linear(x, vars[0])?;
        let delta = tape.linear(z, vars[2])?;
        let delta = tape.scale(delta, self.scaling())?;
        tape.add(base, delta)
    }
}

/// `h = x·Aᵀ`, `y = x·W0ᵀ + (alpha/r)·h·Bᵀ`.
pub fn lora_forward(adapter: &LoraAdapter, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let wrapped = Linear::Lora(adapter.clone());
    eval_pure(&wrapped, x, |tape, vars, x| {
        check_input(tape, x, adapter.d_in())?;
        let down = adapter.down(tape, vars, x)?;
        let y = adapter.up(tape, vars, x, down.latent)?;
        Ok((tape.value(y).clone(), tape.value(down.latent).clone()))
    })
}

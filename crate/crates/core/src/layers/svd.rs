use super::{check_input, eval_pure, Down, Linear, Stage};
use crate::error::{dim_err, Result};
use crate::numerics::{Binder, Init, Tape, Tensor, Var};

/// `W = B·A` with `A[r, d_in]` and `B[d_out, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdLayer {
    pub a: Tensor,
    pub b: Tensor,
}

impl SvdLayer {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        if a.ndim() != 2 || b.ndim() != 2 || b.shape()[1] != a.shape()[0] {
            return dim_err(format!(
                "SVD factors must be A[r, d_in], B[d_out, r]; got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        }
        Ok(Self { a, b })
    }

    /// `A ~ N(0, 1/d_in)`, `B ~ N(0, 1/r)`.
    pub fn init(init: &Init, name: &str, d_in: usize, d_out: usize, rank: usize) -> Self {
        Self {
            a: init.normal(&format!("{name}.a"), &[rank, d_in], 1.0 / d_in as f64),
            b: init.normal(&format!("{name}.b"), &[d_out, rank], 1.0 / rank as f64),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// `r·(d_in + d_out)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.d_in() + self.d_out())
    }

    pub(crate) fn bind(&self, b: &mut Binder) -> Vec<Var> {
        vec![b.bind("a", &self.a, true), b.bind("b", &self.b, true)]
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.a);
        out.push(&mut self.b);
    }

    pub(crate) fn down(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Down> {
        let h = tape.linear(x, vars[0])?;
        Ok(latent_down(tape, h))
    }

    pub(crate) fn up(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        tape.linear(z, vars[1])
    }
}

pub(crate) fn latent_down(tape: &Tape, h: Var) -> Down {
    Down {
        latent: h,
        stages: vec![Stage {
            label: "h".into(),
            var: h,
            shape: tape.shape(h).to_vec(),
        }],
    }
}

/// `h = x·Aᵀ`, `y = h·Bᵀ` for `x[batch, d_in]`.
pub fn svd_forward(layer: &SvdLayer, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let wrapped = Linear::Svd(layer.clone());
    eval_pure(&wrapped, x, |tape, vars, x| {
        check_input(tape, x, layer.d_in())?;
        let down = layer.down(tape, vars, x)?;
        let y = layer.up(tape, vars, down.latent)?;
        Ok((tape.value(y).clone(), tape.value(down.latent).clone()))
    })
}

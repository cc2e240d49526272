use super::{check_input, eval_pure, Linear};
use crate::error::{dim_err, Result};
use crate::numerics::{Binder, Init, Tape, Tensor, Var};

/// Full-rank `y = x·Wᵀ (+ b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLinear {
    pub w: Tensor,
    pub bias: Option<Tensor>,
    pub frozen: bool,
}

impl DenseLinear {
    pub fn new(w: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if w.ndim() != 2 {
            return dim_err(format!("dense weight must be a matrix, got {:?}", w.shape()));
        }
        if let Some(b) = &bias {
            if b.len() != w.shape()[0] {
                return dim_err(format!("bias of length {} does not match {:?}", b.len(), w.shape()));
            }
        }
        Ok(Self { w, bias, frozen: false })
    }

    /// `W ~ N(0, 1/d_in)`, zero bias.
    pub fn init(init: &Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            w: init.normal(&format!("{name}.w"), &[d_out, d_in], 1.0 / d_in as f64),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
            frozen: false,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub(crate) fn bind(&self, b: &mut Binder) -> Vec<Var> {
        let mut v = vec![b.bind("w", &self.w, !self.frozen)];
        if let Some(bias) = &self.bias {
            v.push(b.bind("bias", bias, !self.frozen));
        }
        v
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.linear(x, vars[0])?;
        match vars.get(1) {
            Some(&b) => tape.add_row(y, b),
            None => Ok(y),
        }
    }
}

pub fn dense_forward(layer: &DenseLinear, x: &Tensor) -> Result<Tensor> {
    let wrapped = Linear::Dense(layer.clone());
    eval_pure(&wrapped, x, |tape, vars, x| {
        check_input(tape, x, layer.d_in())?;
        let y = layer.forward(tape, vars, x)?;
        Ok(tape.value(y).clone())
    })
}

use super::svd::latent_down;
use super::{check_input, eval_pure, Down, Linear};
use crate::error::{dim_err, Result};
use crate::numerics::{Activation, Binder, Init, Tape, Tensor, Var};

/// Bottleneck `B·σ(A·x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColaLayer {
    pub a: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

impl ColaLayer {
    pub fn new(a: Tensor, b: Tensor, activation: Activation) -> Result<Self> {
        if a.ndim() != 2 || b.ndim() != 2 || b.shape()[1] != a.shape()[0] {
            return dim_err(format!(
                "CoLA factors must be A[r, d_in], B[d_out, r]; got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        }
        Ok(Self { a, b, activation })
    }

    pub fn init(init: &Init, name: &str, d_in: usize, d_out: usize, rank: usize, activation: Activation) -> Self {
        Self {
            a: init.normal(&format!("{name}.a"), &[rank, d_in], 1.0 / d_in as f64),
            b: init.normal(&format!("{name}.b"), &[d_out, rank], 1.0 / rank as f64),
            activation,
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

    /// The latent is taken after the activation.
    pub(crate) fn down(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Down> {
        let pre = tape.linear(x, vars[0])?;
        let h = tape.activation(pre, self.activation)?;
        Ok(latent_down(tape, h))
    }

    pub(crate) fn up(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        tape.linear(z, vars[1])
    }
}

/// `h = σ(x·Aᵀ)`, `y = h·Bᵀ`.
pub fn cola_forward(layer: &ColaLayer, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let wrapped = Linear::Cola(layer.clone());
    eval_pure(&wrapped, x, |tape, vars, x| {
        check_input(tape, x, layer.d_in())?;
        let down = layer.down(tape, vars, x)?;
        let y = layer.up(tape, vars, down.latent)?;
        Ok((tape.value(y).clone(), tape.value(down.latent).clone()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{svd_forward, SvdLayer};
    use crate::numerics::ops::matmul;

    #[test]
    fn identity_activation_is_bitwise_svd() {
        let init = Init::new(5);
        let c = ColaLayer::init(&init, "l", 6, 4, 3, Activation::Identity);
        let s = SvdLayer::new(c.a.clone(), c.b.clone()).unwrap();
        let x = init.normal("x", &[5, 6], 1.0);
        let (yc, hc) = cola_forward(&c, &x).unwrap();
        let (ys, hs) = svd_forward(&s, &x).unwrap();
        assert_eq!(yc, ys);
        assert_eq!(hc, hs);
    }

    #[test]
    fn relu_example() {
        let c = ColaLayer::new(Tensor::eye(2), Tensor::eye(2), Activation::Relu).unwrap();
        let x = Tensor::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        let (y, h) = cola_forward(&c, &x).unwrap();
        assert_eq!(h.data(), &[0.0, 2.0]);
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn gelu_matches_scalar_oracle() {
        let init = Init::new(6);
        let c = ColaLayer::init(&init, "l", 6, 5, 3, Activation::Gelu);
        let x = init.normal("x", &[4, 6], 1.0);
        let (y, _) = cola_forward(&c, &x).unwrap();
        // scalar gelu applied entrywise, then the up-projection
        let pre = matmul(&x, &c.a.t().unwrap()).unwrap();
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let h = pre.map(gelu);
        let expect = matmul(&h, &c.b.t().unwrap()).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-12);
    }
}

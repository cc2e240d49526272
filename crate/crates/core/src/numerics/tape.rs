//! Operation tape for reverse-mode differentiation.
//!
//! Forward calls evaluate eagerly and append a node; [`Tape::backward`]
//! walks the nodes in reverse and applies each primitive's VJP. Nodes that
//! do not depend on any leaf are skipped.

use super::ops::{Activation, Op};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// A value together with its accumulated cotangent.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Dual {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

/// Cotangents produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recorded ops in order, each with the shapes of its inputs.
    pub fn ops(&self) -> Vec<(&Op, Vec<&[usize]>)> {
        self.nodes
            .iter()
            .filter_map(|n| {
                let op = n.op.as_ref()?;
                Some((op, n.inputs.iter().map(|v| self.shape(*v)).collect()))
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Option<Op>, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Some(op), inputs.to_vec(), requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::BatchMatMul, &[a, b])
    }

    pub fn contract(&mut self, a: Var, b: Var, axis_a: usize, axis_b: usize) -> Result<Var> {
        self.apply(Op::Contract { axis_a, axis_b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(x);
        }
        self.apply(Op::Permute { perm: perm.to_vec() }, &[x])
    }

    /// Transpose of a matrix.
    pub fn t(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// `x · wᵀ` for `x[n, k]` and `w[m, k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let wt = self.t(w)?;
        self.matmul(x, wt)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Narrow { axis, start, len }, &[x])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(Op::AddRow, &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale { factor }, &[x])
    }

    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        self.apply(Op::ScalarMul, &[s, x])
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(x);
        }
        self.apply(Op::Activation(act), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::CausalMask, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Op::Embedding { ids: ids.to_vec() }, &[table])
    }

    /// Mean squared error `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let nb = self.scale(b, -1.0)?;
        let diff = self.add(a, nb)?;
        let sq = self.mul(diff, diff)?;
        let total = self.sum(sq)?;
        self.scale(total, 1.0 / n)
    }

    /// `sum(x^2)`.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    /// Reverse pass seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = Tensor::ones(self.shape(output));
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return dim_err(format!(
                "seed cotangent {:?} does not match output {:?}",
                seed.shape(),
                self.shape(output)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let cotangents = op.vjp_masked(&inputs, &node.value, &g, &need)?;
            for ((input, ct), needed) in node.inputs.iter().zip(cotangents).zip(&need) {
                let (Some(ct), true) = (ct, *needed) else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(ct.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(ct),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    pub fn dual(&self, v: Var, grads: &Gradients) -> Dual {
        Dual {
            value: self.value(v).clone(),
            grad: grads.get_or_zeros(self, v),
        }
    }
}

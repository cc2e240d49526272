//! Tensor-train linear layer.
//!
//! The weight is the chain `C^0 ×₃,₁ C^1 ×₃,₁ … ×₃,₁ C^{n-1}` with
//! `C^i[r_i, d_i, r_{i+1}]`, `n = 2k` and `r_0 = r_n = 1`. The first `k`
//! modes index the output and the last `k` the input, both row-major.
//!
//! Forward absorbs input cores right to left (`C^{n-1}` first), which leaves
//! the mid latent `[batch, r_k]`, then emits output cores `C^{k-1}` down to
//! `C^0`. Stage layouts:
//!
//! * `in_j`  = `[batch, d_k, …, d_{2k-1-j}, r_{2k-j}]`
//! * `out_j` = `[batch, d_{k-1}, …, d_{k-j}, r_{k-j}]`
//!
//! so in a mirror-symmetric layer `in_j` and `out_{k-j}` have identical
//! shapes.

use super::{check_input, eval_pure, Down, Linear, Stage, StageHook};
use crate::error::{dim_err, Result};
use crate::numerics::{ops, Binder, Init, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TtLayer {
    out_dims: Vec<usize>,
    in_dims: Vec<usize>,
    ranks: Vec<usize>,
    pub cores: Vec<Tensor>,
}

pub(crate) fn validate(out_dims: &[usize], in_dims: &[usize], ranks: &[usize]) -> Result<()> {
    let k = out_dims.len();
    if k == 0 || in_dims.len() != k {
        return dim_err(format!(
            "TT layer needs k >= 1 output and input factors, got {out_dims:?} / {in_dims:?}"
        ));
    }
    if ranks.len() != 2 * k + 1 {
        return dim_err(format!(
            "TT layer with {} cores needs {} ranks, got {ranks:?}",
            2 * k,
            2 * k + 1
        ));
    }
    if ranks[0] != 1 || ranks[2 * k] != 1 {
        return dim_err(format!("TT boundary ranks must be 1, got {ranks:?}"));
    }
    if ranks.iter().chain(out_dims).chain(in_dims).any(|&v| v == 0) {
        return dim_err("TT dims and ranks must be positive");
    }
    Ok(())
}

impl TtLayer {
    pub fn new(out_dims: &[usize], in_dims: &[usize], ranks: &[usize], cores: Vec<Tensor>) -> Result<Self> {
        validate(out_dims, in_dims, ranks)?;
        let layer = Self {
            out_dims: out_dims.to_vec(),
            in_dims: in_dims.to_vec(),
            ranks: ranks.to_vec(),
            cores,
        };
        if layer.cores.len() != layer.order() {
            return dim_err(format!("expected {} cores, got {}", layer.order(), layer.cores.len()));
        }
        for i in 0..layer.order() {
            let want = layer.core_shape(i);
            if layer.cores[i].shape() != want {
                return dim_err(format!(
                    "core {i} must have shape {want:?}, got {:?}",
                    layer.cores[i].shape()
                ));
            }
        }
        Ok(layer)
    }

    /// Output cores `~ N(0, 1/r_i)`, input cores `~ N(0, 1/(r_i·d_i))`,
    /// which gives dense-equivalent entries of variance `1/d_in`.
    pub fn init(init: &Init, name: &str, out_dims: &[usize], in_dims: &[usize], ranks: &[usize]) -> Result<Self> {
        validate(out_dims, in_dims, ranks)?;
        let k = out_dims.len();
        let dims: Vec<usize> = out_dims.iter().chain(in_dims).copied().collect();
        let cores = (0..2 * k)
            .map(|i| {
                let var = if i < k {
                    1.0 / ranks[i] as f64
                } else {
                    1.0 / (ranks[i] * dims[i]) as f64
                };
                init.normal(&format!("{name}.core{i}"), &[ranks[i], dims[i], ranks[i + 1]], var)
            })
            .collect();
        Self::new(out_dims, in_dims, ranks, cores)
    }

    /// Number of cores `n = 2k`.
    pub fn order(&self) -> usize {
        2 * self.half()
    }

    pub fn half(&self) -> usize {
        self.out_dims.len()
    }

    pub fn out_dims(&self) -> &[usize] {
        &self.out_dims
    }

    pub fn in_dims(&self) -> &[usize] {
        &self.in_dims
    }

    /// `d_0..d_{n-1}`.
    pub fn dims(&self) -> Vec<usize> {
        self.out_dims.iter().chain(&self.in_dims).copied().collect()
    }

    /// `r_0..r_n`.
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn core_shape(&self, i: usize) -> Vec<usize> {
        vec![self.ranks[i], self.dims()[i], self.ranks[i + 1]]
    }

    pub fn d_in(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn d_out(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Bond rank `r_k` at the middle of the chain.
    pub fn mid_rank(&self) -> usize {
        self.ranks[self.half()]
    }

    /// Mode sizes and ranks mirror about the middle of the chain.
    pub fn symmetric(&self) -> bool {
        let n = self.order();
        let d = self.dims();
        (0..n).all(|i| d[i] == d[n - 1 - i]) && (0..=n).all(|i| self.ranks[i] == self.ranks[n - i])
    }

    /// `Σ r_i·d_i·r_{i+1}`.
    pub fn param_count(&self) -> usize {
        (0..self.order())
            .map(|i| self.core_shape(i).iter().product::<usize>())
            .sum()
    }

    /// Logical shape of stage `in_j` (`1 <= j <= k`).
    pub fn in_stage_shape(&self, j: usize, batch: usize) -> Vec<usize> {
        let k = self.half();
        let mut s = vec![batch];
        s.extend_from_slice(&self.in_dims[..k - j]);
        s.push(self.ranks[2 * k - j]);
        s
    }

    /// Logical shape of stage `out_j` (`1 <= j <= k`).
    pub fn out_stage_shape(&self, j: usize, batch: usize) -> Vec<usize> {
        let k = self.half();
        let mut s = vec![batch];
        s.extend(self.out_dims[k - j..].iter().rev());
        s.push(self.ranks[k - j]);
        s
    }

    pub(crate) fn bind(&self, b: &mut Binder) -> Vec<Var> {
        self.cores
            .iter()
            .enumerate()
            .map(|(i, c)| b.bind(&format!("core{i}"), c, true))
            .collect()
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend(self.cores.iter_mut());
    }

    pub(crate) fn down(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Down> {
        let k = self.half();
        let n = self.order();
        let dims = self.dims();
        let batch = tape.shape(x)[0];
        let mut state = x;
        let mut r_next = 1;
        let mut stages = Vec::with_capacity(k);
        for (j, i) in (k..n).rev().enumerate() {
            let d = dims[i];
            let rest: usize = dims[k..i].iter().product();
            let s = tape.reshape(state, &[batch * rest, d * r_next])?;
            let c = tape.reshape(vars[i], &[self.ranks[i], d * r_next])?;
            state = tape.contract(s, c, 1, 1)?;
            r_next = self.ranks[i];
            let flat = tape.reshape(state, &[batch, rest * r_next])?;
            stages.push(Stage {
                label: format!("in_{}", j + 1),
                var: flat,
                shape: self.in_stage_shape(j + 1, batch),
            });
            state = flat;
        }
        Ok(Down { latent: state, stages })
    }

    pub(crate) fn up(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        mut hook: Option<&mut StageHook<'_>>,
    ) -> Result<(Var, Vec<Stage>)> {
        let k = self.half();
        let dims = self.dims();
        let batch = tape.shape(z)[0];
        if tape.shape(z) != [batch, self.mid_rank()] {
            return dim_err(format!(
                "TT mid latent must be [batch, {}], got {:?}",
                self.mid_rank(),
                tape.shape(z)
            ));
        }
        let mut state = z;
        let mut emitted = 1usize;
        let mut stages = Vec::with_capacity(k);
        for (j, i) in (0..k).rev().enumerate() {
            let (d, r_in, r_out) = (dims[i], self.ranks[i + 1], self.ranks[i]);
            let s = tape.reshape(state, &[batch * emitted, r_in])?;
            let c = tape.permute(vars[i], &[2, 1, 0])?;
            let c = tape.reshape(c, &[r_in, d * r_out])?;
            let next = tape.matmul(s, c)?;
            emitted *= d;
            let flat = tape.reshape(next, &[batch, emitted * r_out])?;
            let stage = Stage {
                label: format!("out_{}", j + 1),
                var: flat,
                shape: self.out_stage_shape(j + 1, batch),
            };
            state = match hook.as_deref_mut() {
                Some(h) => h(tape, j + 1, &stage)?,
                None => flat,
            };
            stages.push(stage);
        }
        // [batch, d_{k-1}, ..., d_0] -> [batch, d_0, ..., d_{k-1}]
        let mut rev_shape = vec![batch];
        rev_shape.extend(self.out_dims.iter().rev());
        let y = tape.reshape(state, &rev_shape)?;
        let perm: Vec<usize> = std::iter::once(0).chain((1..=k).rev()).collect();
        let y = tape.permute(y, &perm)?;
        let y = tape.reshape(y, &[batch, self.d_out()])?;
        Ok((y, stages))
    }
}

/// Runs the contraction chain; returns `y` and every stage
/// (`in_1..in_k`, `out_1..out_k`) in its logical shape.
pub fn tt_forward(layer: &TtLayer, x: &Tensor) -> Result<(Tensor, Vec<(String, Tensor)>)> {
    let wrapped = Linear::Tt(layer.clone());
    eval_pure(&wrapped, x, |tape, vars, x| {
        check_input(tape, x, layer.d_in())?;
        let down = layer.down(tape, vars, x)?;
        let (y, out_stages) = layer.up(tape, vars, down.latent, None)?;
        let mut latents = Vec::new();
        for st in down.stages.iter().chain(&out_stages) {
            latents.push((st.label.clone(), tape.value(st.var).reshape(&st.shape)?));
        }
        Ok((tape.value(y).clone(), latents))
    })
}

/// Dense `[d_out, d_in]` matrix of the chain, consistent with [`tt_forward`].
pub fn tt_to_dense(layer: &TtLayer) -> Result<Tensor> {
    let dims = layer.dims();
    let r = layer.ranks();
    let mut acc = layer.cores[0].reshape(&[dims[0], r[1]])?;
    for i in 1..layer.order() {
        let c = layer.cores[i].reshape(&[r[i], dims[i] * r[i + 1]])?;
        let p = acc.shape()[0];
        acc = ops::matmul(&acc, &c)?.reshape(&[p * dims[i], r[i + 1]])?;
    }
    acc.reshape(&[layer.d_out(), layer.d_in()])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Entry of the chain by explicit summation over every bond index.
    fn dense_oracle(layer: &TtLayer) -> Tensor {
        let dims = layer.dims();
        let n = layer.order();
        let r = layer.ranks().to_vec();
        let total: usize = dims.iter().product();
        let mut out = vec![0.0; total];
        let mut idx = vec![0usize; n];
        for (flat, o) in out.iter_mut().enumerate() {
            let mut rem = flat;
            for i in (0..n).rev() {
                idx[i] = rem % dims[i];
                rem /= dims[i];
            }
            // vector over the current bond, starting from r_0 = 1
            let mut v = vec![1.0];
            for i in 0..n {
                let mut next = vec![0.0; r[i + 1]];
                for (a, &va) in v.iter().enumerate() {
                    for (b, nb) in next.iter_mut().enumerate() {
                        *nb += va * layer.cores[i].get(&[a, idx[i], b]);
                    }
                }
                v = next;
            }
            *o = v[0];
        }
        Tensor::new(&[layer.d_out(), layer.d_in()], out).unwrap()
    }

    fn identity_pair() -> TtLayer {
        // C0[0, o, a] = δ(o, a), C1[a, i, 0] = δ(a, i)
        let c0 = Tensor::eye(2).reshape(&[1, 2, 2]).unwrap();
        let c1 = Tensor::eye(2).reshape(&[2, 2, 1]).unwrap();
        TtLayer::new(&[2], &[2], &[1, 2, 1], vec![c0, c1]).unwrap()
    }

    #[test]
    fn identity_cores_give_identity() {
        let l = identity_pair();
        assert_eq!(tt_to_dense(&l).unwrap(), Tensor::eye(2));
        let x = Tensor::from_rows(&[vec![0.5, -3.0], vec![2.0, 7.0]]).unwrap();
        assert_eq!(tt_forward(&l, &x).unwrap().0, x);
    }

    #[test]
    fn rank_one_chain_is_an_outer_product() {
        let c0 = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let c1 = Tensor::new(&[1, 2, 1], vec![3.0, 4.0]).unwrap();
        let l = TtLayer::new(&[2], &[2], &[1, 1, 1], vec![c0, c1]).unwrap();
        let w = tt_to_dense(&l).unwrap();
        assert_eq!(w.data(), &[3.0, 4.0, 6.0, 8.0]);
        assert_eq!(w, dense_oracle(&l));
    }

    #[test]
    fn forward_matches_dense_for_random_layers() {
        let init = Init::new(8);
        let configs: [(&[usize], &[usize], &[usize]); 3] = [
            (&[2], &[2], &[1, 3, 1]),
            (&[2, 3], &[3, 2], &[1, 2, 4, 3, 1]),
            (&[2, 3, 2], &[4, 3, 2], &[1, 2, 3, 3, 4, 2, 1]),
        ];
        for (c, (o, i, r)) in configs.iter().enumerate() {
            let l = TtLayer::init(&init, &format!("tt{c}"), o, i, r).unwrap();
            let w = tt_to_dense(&l).unwrap();
            assert!(w.max_abs_diff(&dense_oracle(&l)).unwrap() < 1e-12);
            let x = init.normal(&format!("x{c}"), &[5, l.d_in()], 1.0);
            let (y, _) = tt_forward(&l, &x).unwrap();
            let dense = ops::matmul(&x, &w.t().unwrap()).unwrap();
            assert!(y.max_abs_diff(&dense).unwrap() < 1e-10);
        }
    }

    #[test]
    fn symmetric_six_core_stage_shapes() {
        let init = Init::new(9);
        let l = TtLayer::init(&init, "tt", &[2, 3, 4], &[4, 3, 2], &[1, 2, 3, 3, 3, 2, 1]).unwrap();
        assert!(l.symmetric());
        let x = init.normal("x", &[5, l.d_in()], 1.0);
        let (_, stages) = tt_forward(&l, &x).unwrap();
        let labels: Vec<&str> = stages.iter().map(|(s, _)| s.as_str()).collect();
        assert_eq!(labels, ["in_1", "in_2", "in_3", "out_1", "out_2", "out_3"]);
        let shape = |name: &str| stages.iter().find(|(s, _)| s == name).unwrap().1.shape().to_vec();
        assert_eq!(shape("in_3"), [5, 3]);
        assert_eq!(shape("in_2"), shape("out_1"));
        assert_eq!(shape("in_1"), shape("out_2"));
    }

    #[test]
    fn invalid_configs_rejected() {
        let init = Init::new(0);
        assert!(TtLayer::init(&init, "t", &[2], &[2], &[2, 2, 1]).is_err());
        assert!(TtLayer::init(&init, "t", &[2], &[2, 2], &[1, 2, 1]).is_err());
        let l = identity_pair();
        assert!(tt_forward(&l, &Tensor::ones(&[1, 3])).is_err());
    }

    #[test]
    fn param_count_sums_cores() {
        let l = TtLayer::init(&Init::new(0), "t", &[4], &[4], &[1, 2, 1]).unwrap();
        assert_eq!(l.param_count(), 16);
    }
}

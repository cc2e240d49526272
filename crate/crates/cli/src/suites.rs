//! Equivalence suites run by `lax-kit equivalence`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lax_core::lax::{lax_fuse, stacked_weight, Gate, GateVariant, LaxPathway, NormPlacement};
use lax_core::layers::{tt_forward, tt_to_dense, Linear, SvdLayer, TtLayer};
use lax_core::nets::{
    build_net, model_forward, BlockSpec, HeadKind, Input, InputKind, LaxSpec, LayerSpec, ModelSpec, NetSpec,
};
use lax_core::numerics::ops::{concat, matmul};
use lax_core::numerics::{Init, Tensor};
use lax_core::Result;

const GATES: [GateVariant; 4] = [
    GateVariant::Identity,
    GateVariant::Linear,
    GateVariant::Tensor,
    GateVariant::Dense,
];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_err: f64,
    /// Errors must stay strictly below this, or be exactly zero when it is 0.
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn pass(&self) -> bool {
        if self.tolerance == 0.0 {
            self.max_err == 0.0
        } else {
            self.max_err < self.tolerance
        }
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Fused forward against the stacked weight acting on `(x; x_prev)`.
pub fn stacked_suite(cases: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x57ac);
    let mut max_err: f64 = 0.0;
    for i in 0..cases {
        let init = Init::new(i as u64);
        let variant = GATES[i % GATES.len()];
        let (d_in, d_out) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let r = rng.random_range(1..=16);
        let r_prev = match variant {
            GateVariant::Identity | GateVariant::Linear => r,
            _ => rng.random_range(1..=16),
        };
        let layer = SvdLayer::init(&init, "layer", d_in, d_out, r);
        let a_prev = init.normal("a_prev", &[r_prev, d_in], 1.0);
        let gate = match variant {
            GateVariant::Linear => Gate::linear(r, rng.random_range(-2.0..2.0)),
            GateVariant::Dense => Gate::dense(init.normal("g", &[r, r_prev], 1.0))?,
            v => Gate::init(&init, "g", v, r_prev, r)?,
        };
        let x = init.normal("x", &[3, d_in], 1.0);
        let x_prev = init.normal("x_prev", &[3, d_in], 1.0);
        let h_prev = matmul(&x_prev, &a_prev.t()?)?;
        let pathway = LaxPathway::new("latent", "latent", gate.clone(), None);
        let (fused, _) = lax_fuse(&Linear::Svd(layer.clone()), &x, Some(&h_prev), Some(&pathway))?;
        let w = stacked_weight(&layer.b, &layer.a, &gate, &a_prev)?;
        let stacked = matmul(&concat(&x, &x_prev, 1)?, &w.t()?)?;
        max_err = max_err.max(max_abs_diff(&fused, &stacked));
    }
    Ok(SuiteResult {
        name: "stacked-weight",
        cases,
        max_err,
        tolerance: 1e-12,
    })
}

/// Contraction-chain forward against the reconstructed dense weight.
pub fn tt_suite(cases: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x77);
    let mut max_err: f64 = 0.0;
    for i in 0..cases {
        let k = [1, 2, 3][i % 3];
        let out: Vec<usize> = (0..k).map(|_| rng.random_range(1..=4)).collect();
        let inp: Vec<usize> = (0..k).map(|_| rng.random_range(1..=4)).collect();
        let mut ranks: Vec<usize> = (0..=2 * k).map(|_| rng.random_range(1..=4)).collect();
        ranks[0] = 1;
        ranks[2 * k] = 1;
        let init = Init::new(1000 + i as u64);
        let layer = TtLayer::init(&init, "tt", &out, &inp, &ranks)?;
        let x = init.normal("x", &[2, layer.d_in()], 1.0);
        let (y, _) = tt_forward(&layer, &x)?;
        let dense = matmul(&x, &tt_to_dense(&layer)?.t()?)?;
        max_err = max_err.max(max_abs_diff(&y, &dense));
    }
    Ok(SuiteResult {
        name: "tt-reconstruction",
        cases,
        max_err,
        tolerance: 1e-10,
    })
}

fn toy(lax: LaxSpec, seed: u64) -> NetSpec {
    NetSpec::Transformer(ModelSpec {
        input: InputKind::Tokens { vocab: 7, max_len: 5 },
        head: HeadKind::Lm { vocab: 7 },
        depth: 2,
        block: BlockSpec::uniform(8, 2, LayerSpec::svd(3)),
        lax,
        seed,
    })
}

/// Zeroed gates against the same model built without LaX; must be bitwise.
pub fn zero_residual_suite(seeds: usize) -> Result<SuiteResult> {
    let mut max_err: f64 = 0.0;
    for seed in 0..seeds as u64 {
        let mut lax = LaxSpec::with_gate(GATES[seed as usize % GATES.len()]);
        lax.norm = Some(NormPlacement::Off);
        let mut net = build_net(&toy(lax, seed))?;
        net.zero_gates();
        let base = build_net(&toy(LaxSpec::default(), seed))?;
        let tokens: Vec<usize> = (0..10).map(|i| (i * 3 + seed as usize) % 7).collect();
        let input = Input::Tokens { ids: tokens, batch: 2 };
        let y = model_forward(&net, &input, false)?.logits;
        let y0 = model_forward(&base, &input, false)?.logits;
        max_err = max_err.max(max_abs_diff(&y, &y0));
    }
    Ok(SuiteResult {
        name: "zero-residual",
        cases: seeds,
        max_err,
        tolerance: 0.0,
    })
}

pub fn all_suites() -> Result<Vec<SuiteResult>> {
    Ok(vec![stacked_suite(100)?, tt_suite(50)?, zero_residual_suite(20)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_small_runs() {
        for s in [
            stacked_suite(12).unwrap(),
            tt_suite(9).unwrap(),
            zero_residual_suite(4).unwrap(),
        ] {
            assert!(s.pass(), "{s:?}");
        }
    }

    #[test]
    fn zero_tolerance_means_exact() {
        let mut s = SuiteResult {
            name: "x",
            cases: 1,
            max_err: 0.0,
            tolerance: 0.0,
        };
        assert!(s.pass());
        s.max_err = 1e-300;
        assert!(!s.pass());
    }
}

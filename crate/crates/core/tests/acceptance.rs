//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line reaches the captured
//! output of `cargo test`. Exits non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lax_core::accounting::{model_overhead, vit_base, GateShape, LayerShape};
use lax_core::lax::{
    lax_fuse, most_square_fold, stacked_weight, tt_intra_pathways, Gate, GateKind, GateVariant, LatentBus, LaxNorm,
    LaxPathway, LaxSlot, NormPlacement, SlotVars,
};
use lax_core::layers::{tt_forward, tt_to_dense, ColaLayer, DenseLinear, Linear, LoraAdapter, SvdLayer, TtLayer};
use lax_core::nets::*;
use lax_core::numerics::{grad_check, trainable_values, Activation, Binder, Init, Tape, Tensor};
use lax_core::training::{make_task, train, History, TaskSpec, TrainConfig};

/// Outcome of one criterion: detail text, or the reason it failed.
type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

// ---- independent oracles -------------------------------------------------

/// `a[m, k] · b[k, n]` by triple loop.
fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    assert_eq!(b.shape()[0], k);
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.get(&[i, p]) * b.get(&[p, j])).sum()
    })
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn(&[n, m], |idx| a.get(&[idx % m, idx / m]))
}

/// `[r_target, r_source]` matrix of a gate, from its parameters.
fn gate_matrix(g: &Gate) -> Tensor {
    let (s, t) = (g.source_rank(), g.target_rank());
    match &g.kind {
        GateKind::Identity => Tensor::eye(s),
        GateKind::Linear { beta } => Tensor::from_fn(&[t, s], |i| if i / s == i % s { beta.data()[0] } else { 0.0 }),
        GateKind::Dense { g } => g.clone(),
        GateKind::Tensor {
            c0,
            c1,
            fold: (_, r1),
            out_fold: (_, q1),
        } => Tensor::from_fn(&[t, s], |idx| {
            let (row, col) = (idx / s, idx % s);
            let (a, b) = (row / q1, row % q1);
            let (i, j) = (col / r1, col % r1);
            c0.get(&[0, a, i]) * c1.get(&[j, b, 0])
        }),
    }
}

/// Every entry of a TT weight as an explicit sum over bond indices.
fn tt_loop_oracle(layer: &TtLayer) -> Tensor {
    let dims = layer.dims();
    let r = layer.ranks().to_vec();
    let n = dims.len();
    let total: usize = dims.iter().product();
    let data = (0..total)
        .map(|flat| {
            let mut idx = vec![0; n];
            let mut rem = flat;
            for i in (0..n).rev() {
                idx[i] = rem % dims[i];
                rem /= dims[i];
            }
            let mut v = vec![1.0];
            for i in 0..n {
                v = (0..r[i + 1])
                    .map(|b| (0..r[i]).map(|a| v[a] * layer.cores[i].get(&[a, idx[i], b])).sum())
                    .collect();
            }
            v[0]
        })
        .collect();
    Tensor::new(&[layer.d_out(), layer.d_in()], data).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

// ---- 1 -------------------------------------------------------------------

fn stacked_form() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let init = Init::new(100 + case);
        let variant = GateVariant::ALL[case as usize % 4];
        let (d_in, d_out) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let r = rng.random_range(1..=16);
        let r_prev = match variant {
            GateVariant::Identity | GateVariant::Linear => r,
            _ => rng.random_range(1..=16),
        };
        let d_prev = rng.random_range(1..=32);
        let layer = SvdLayer::init(&init, "cur", d_in, d_out, r);
        let a_prev = init.normal("a_prev", &[r_prev, d_prev], 1.0);
        let gate = match variant {
            GateVariant::Identity => Gate::identity(r),
            GateVariant::Linear => Gate::linear(r, rng.random_range(-2.0..2.0)),
            GateVariant::Dense => Gate::dense(init.normal("g", &[r, r_prev], 1.0)).unwrap(),
            GateVariant::Tensor => {
                let ((r0, r1), (q0, q1)) = (most_square_fold(r_prev), most_square_fold(r));
                Gate::tensor(
                    init.normal("c0", &[1, q0, r0], 1.0),
                    init.normal("c1", &[r1, q1, 1], 1.0),
                )
                .unwrap()
            }
        };
        let batch = rng.random_range(1..=4);
        let x = init.normal("x", &[batch, d_in], 1.0);
        let x_prev = init.normal("x_prev", &[batch, d_prev], 1.0);
        let h_prev = naive_matmul(&x_prev, &transpose(&a_prev));
        let p = LaxPathway::new("latent", "latent", gate.clone(), None);
        let (fused, _) =
            lax_fuse(&Linear::Svd(layer.clone()), &x, Some(&h_prev), Some(&p)).map_err(|e| e.to_string())?;

        // [B·A | B·G·A_prev] on (x; x_prev), entirely from loops
        let left = naive_matmul(&layer.b, &layer.a);
        let right = naive_matmul(&layer.b, &naive_matmul(&gate_matrix(&gate), &a_prev));
        let w = Tensor::from_fn(&[d_out, d_in + d_prev], |i| {
            let (row, col) = (i / (d_in + d_prev), i % (d_in + d_prev));
            if col < d_in {
                left.get(&[row, col])
            } else {
                right.get(&[row, col - d_in])
            }
        });
        let xt = Tensor::from_fn(&[batch, d_in + d_prev], |i| {
            let (row, col) = (i / (d_in + d_prev), i % (d_in + d_prev));
            if col < d_in {
                x.get(&[row, col])
            } else {
                x_prev.get(&[row, col - d_in])
            }
        });
        let want = naive_matmul(&xt, &transpose(&w));
        worst = worst.max(max_diff(&fused, &want));
        let lib = stacked_weight(&layer.b, &layer.a, &gate, &a_prev).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(&lib, &w));
    }
    ensure(worst < 1e-12, || format!("max error {worst:.3e}"))?;
    within(t.elapsed(), 5.0)?;
    Ok(format!(
        "100 cases, max error {worst:.2e}, {:.2}s",
        t.elapsed().as_secs_f64()
    ))
}

// ---- 2 -------------------------------------------------------------------

fn tt_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut fwd, mut rec): (f64, f64) = (0.0, 0.0);
    for case in 0..50 {
        let k = [1, 2, 3][case % 3];
        let out: Vec<usize> = (0..k).map(|_| rng.random_range(1..=4)).collect();
        let inp: Vec<usize> = (0..k).map(|_| rng.random_range(1..=4)).collect();
        let mut ranks: Vec<usize> = (0..=2 * k).map(|_| rng.random_range(1..=4)).collect();
        ranks[0] = 1;
        ranks[2 * k] = 1;
        let init = Init::new(200 + case as u64);
        let layer = TtLayer::init(&init, "tt", &out, &inp, &ranks).map_err(|e| e.to_string())?;
        let dense = tt_to_dense(&layer).map_err(|e| e.to_string())?;
        let oracle = tt_loop_oracle(&layer);
        // both sum the same products; only association order may differ
        let scale = oracle.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        rec = rec.max(max_diff(&dense, &oracle) / scale);
        let x = init.normal("x", &[3, layer.d_in()], 1.0);
        let (y, _) = tt_forward(&layer, &x).map_err(|e| e.to_string())?;
        fwd = fwd.max(max_diff(&y, &naive_matmul(&x, &transpose(&oracle))));
    }
    ensure(fwd < 1e-10, || format!("forward error {fwd:.3e}"))?;
    ensure(rec < 4.0 * f64::EPSILON * 16.0, || {
        format!("reconstruction error {rec:.3e} beyond rounding")
    })?;
    within(t.elapsed(), 10.0)?;
    Ok(format!(
        "50 layers, forward error {fwd:.2e}, reconstruction rel error {rec:.2e}, {:.2}s",
        t.elapsed().as_secs_f64()
    ))
}

// ---- 3 -------------------------------------------------------------------

const GC_WIDTH: usize = 4;
const GC_RANK: usize = 3;

fn gc_layer(kind: &str, init: &Init, name: &str) -> Linear {
    let (d, r) = (GC_WIDTH, GC_RANK);
    match kind {
        "dense" => Linear::Dense(DenseLinear::init(init, name, d, d, true)),
        "svd" => Linear::Svd(SvdLayer::init(init, name, d, d, r)),
        "cola" => Linear::Cola(ColaLayer::init(init, name, d, d, r, Activation::Gelu)),
        "tt" => Linear::Tt(TtLayer::init(init, name, &[2, 2], &[2, 2], &[1, 2, r, 2, 1]).unwrap()),
        "lora" => {
            let mut l = LoraAdapter::init(init, name, init.normal(&format!("{name}.w0"), &[d, d], 0.5), r, 2.0);
            // nonzero so the down factor gets a gradient too
            l.b = init.normal(&format!("{name}.b"), &[d, r], 0.5);
            Linear::Lora(l)
        }
        _ => unreachable!(),
    }
}

/// Two slots on one stream; TT slots also carry their intra pathways.
fn gc_slots(kind: &str, v: GateVariant, norm: NormPlacement, seed: u64) -> Vec<LaxSlot> {
    let init = Init::new(seed);
    (0..2)
        .map(|i| {
            let id = format!("l{i}");
            let layer = gc_layer(kind, &init, &id);
            if kind == "dense" {
                return LaxSlot::plain(&id, layer);
            }
            let inter = (i > 0).then(|| {
                let mut g = Gate::init(&init, &format!("{id}.g"), v, GC_RANK, GC_RANK).unwrap();
                if let GateKind::Linear { beta } = &mut g.kind {
                    *beta = Tensor::scalar(0.7);
                }
                let dim = if norm == NormPlacement::Output {
                    GC_WIDTH
                } else {
                    GC_RANK
                };
                LaxPathway::new("h", "h", g, LaxNorm::new(norm, dim))
            });
            let intra = match &layer {
                Linear::Tt(tt) => tt_intra_pathways(tt, v, &init, &id).unwrap(),
                _ => Vec::new(),
            };
            LaxSlot {
                stream: Some("s".into()),
                inter,
                intra,
                ..LaxSlot::plain(&id, layer)
            }
        })
        .collect()
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let init = Init::new(3);
    let x = init.normal("x", &[2, GC_WIDTH], 1.0);
    let c = init.normal("c", &[2, GC_WIDTH], 1.0);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for kind in ["dense", "svd", "cola", "tt", "lora"] {
        for v in GateVariant::ALL {
            for norm in [NormPlacement::Off, NormPlacement::Latent, NormPlacement::Output] {
                let slots = gc_slots(kind, v, norm, 30 + cases);
                let params = trainable_values(|b| slots.iter().for_each(|s| drop(s.bind(b))));
                let n: usize = params.iter().map(Tensor::len).sum();
                ensure(n <= 1000, || format!("{kind}/{v:?}: {n} params"))?;
                let report = grad_check(
                    |tape, vars| {
                        let bound: Vec<SlotVars> = {
                            let mut b = Binder::replay(tape, vars);
                            slots.iter().map(|s| s.bind(&mut b)).collect()
                        };
                        let mut bus = LatentBus::new();
                        let mut h = tape.constant(x.clone());
                        for (s, sv) in slots.iter().zip(&bound) {
                            h = s.forward(tape, sv, h, &mut bus, None)?;
                        }
                        // fixed projection; a plain sum of a normalized output is flat
                        let c = tape.constant(c.clone());
                        let w = tape.mul(h, c)?;
                        tape.sum(w)
                    },
                    &params,
                    1e-6,
                    1e-4,
                )
                .map_err(|e| format!("{kind}/{v:?}/{norm:?}: {e}"))?;
                worst = worst.max(report.max_rel_err);
                ensure(report.pass, || {
                    format!("{kind}/{v:?}/{norm:?}: {:.3e}", report.max_rel_err)
                })?;
                cases += 1;
            }
        }
    }
    within(t.elapsed(), 60.0)?;
    Ok(format!(
        "{cases} layer x gate x norm cases, max rel error {worst:.2e}, {:.2}s",
        t.elapsed().as_secs_f64()
    ))
}

// ---- 4 -------------------------------------------------------------------

fn parameter_formulas() -> Outcome {
    let init = Init::new(4);
    for d_in in [1, 5, 32, 77] {
        for d_out in [1, 9, 64] {
            for r in [1, 3, 16] {
                let svd = SvdLayer::init(&init, "s", d_in, d_out, r);
                let cola = ColaLayer::init(&init, "c", d_in, d_out, r, Activation::Relu);
                ensure(svd.param_count() == r * (d_in + d_out), || {
                    format!("svd {d_in} {d_out} {r}")
                })?;
                ensure(cola.param_count() == r * (d_in + d_out), || {
                    format!("cola {d_in} {d_out} {r}")
                })?;
            }
        }
    }
    for (s, t) in [(4, 4), (6, 9), (16, 16), (12, 8), (7, 7)] {
        for v in GateVariant::ALL {
            if matches!(v, GateVariant::Identity | GateVariant::Linear) && s != t {
                continue;
            }
            let g = Gate::init(&init, "g", v, s, t).map_err(|e| e.to_string())?;
            let ((r0, r1), (q0, q1)) = (most_square_fold(s), most_square_fold(t));
            let want = match v {
                GateVariant::Identity => 0,
                GateVariant::Linear => 1,
                GateVariant::Tensor => q0 * r0 + r1 * q1,
                GateVariant::Dense => t * s,
            };
            ensure(g.param_count() == want, || {
                format!("{v:?} {s}->{t}: {} != {want}", g.param_count())
            })?;
            ensure(GateShape::new(v, s, t).unwrap().params() == want, || {
                format!("{v:?} shape {s}->{t}")
            })?;
        }
    }
    let (built, rejected) = common::brute_force(100);
    ensure(built >= 70, || format!("only {built} random specs built"))?;
    Ok(format!(
        "closed forms exact; brute force agrees on {built} built specs ({rejected} rejected by both)"
    ))
}

// ---- 5 -------------------------------------------------------------------

fn vit_totals() -> Outcome {
    let total =
        |rank, lax| model_overhead(&NetSpec::Transformer(vit_base(rank, lax)), None, 197).map_err(|e| e.to_string());
    let r256 = total(256, LaxSpec::default())?.total_params as f64;
    let r128 = total(128, LaxSpec::default())?.total_params as f64;
    let near = |got: f64, want: f64| (got - want).abs() / want <= 0.05;
    ensure(near(r256, 44.17e6), || format!("r=256 total {r256}"))?;
    ensure(near(r128, 22.94e6), || format!("r=128 total {r128}"))?;
    let gated = total(256, LaxSpec::with_gate(GateVariant::Tensor))?;
    let added = gated.lax_params as f64;
    ensure((0.05e6..=0.10e6).contains(&added), || {
        format!("tensor-gate addition {added}")
    })?;
    ensure(gated.overhead_ratio <= 0.002, || {
        format!("overhead ratio {}", gated.overhead_ratio)
    })?;
    Ok(format!(
        "r=256 {:.2}M, r=128 {:.2}M, tensor-gate addition {:.4}M, ratio {:.4}%",
        r256 / 1e6,
        r128 / 1e6,
        added / 1e6,
        100.0 * gated.overhead_ratio
    ))
}

// ---- 6 -------------------------------------------------------------------

fn toy_transformer(lax: LaxSpec, seed: u64) -> NetSpec {
    let mut block = BlockSpec::uniform(8, 2, LayerSpec::svd(3));
    block.mlp_up = LayerSpec::cola(3, Activation::Gelu);
    NetSpec::Transformer(ModelSpec {
        input: InputKind::Tokens { vocab: 7, max_len: 6 },
        head: HeadKind::Lm { vocab: 7 },
        depth: 3,
        block,
        lax,
        seed,
    })
}

fn zero_residual() -> Outcome {
    let mut cases = 0;
    for seed in 0..20 {
        let base = build_net(&toy_transformer(LaxSpec::default(), seed)).map_err(|e| e.to_string())?;
        let tokens: Vec<usize> = (0..12).map(|i| (i * 5 + seed as usize) % 7).collect();
        let input = Input::Tokens { ids: tokens, batch: 2 };
        let want = model_forward(&base, &input, false).map_err(|e| e.to_string())?.logits;
        for v in GateVariant::ALL {
            let mut lax = LaxSpec::with_gate(v);
            lax.norm = Some(NormPlacement::Off);
            let mut net = build_net(&toy_transformer(lax, seed)).map_err(|e| e.to_string())?;
            net.zero_gates();
            let got = model_forward(&net, &input, false).map_err(|e| e.to_string())?.logits;
            ensure(bits(&got) == bits(&want), || {
                format!("seed {seed} {v:?}: logits differ")
            })?;
            cases += 1;
        }
    }
    Ok(format!("{cases} seed x gate cases bitwise equal"))
}

// ---- 7 -------------------------------------------------------------------

fn intra_tt() -> Outcome {
    let init = Init::new(7);
    let layer =
        TtLayer::init(&init, "tt", &[2, 3, 4], &[4, 3, 2], &[1, 2, 3, 3, 3, 2, 1]).map_err(|e| e.to_string())?;
    let pathways = tt_intra_pathways(&layer, GateVariant::Identity, &init, "tt").map_err(|e| e.to_string())?;
    let routes: Vec<(String, String)> = pathways
        .iter()
        .map(|p| (p.source_label.clone(), p.target_label.clone()))
        .collect();
    let want = [("in_1", "out_2"), ("in_2", "out_1")].map(|(a, b)| (a.to_string(), b.to_string()));
    ensure(routes == want, || format!("routes {routes:?}"))?;

    let x = init.normal("x", &[3, layer.d_in()], 1.0);
    let (plain, stages) = tt_forward(&layer, &x).map_err(|e| e.to_string())?;
    let shape = |label: &str| stages.iter().find(|(l, _)| l == label).map(|(_, t)| t.shape().to_vec());
    for (src, dst) in &routes {
        ensure(shape(src).is_some() && shape(src) == shape(dst), || {
            format!("{src} vs {dst}: {:?} {:?}", shape(src), shape(dst))
        })?;
    }

    let run = |intra: Vec<LaxPathway>| -> Result<Tensor, String> {
        let slot = LaxSlot {
            intra,
            ..LaxSlot::plain("tt", Linear::Tt(layer.clone()))
        };
        let mut tape = Tape::new();
        let vars = slot.bind(&mut Binder::new(&mut tape));
        let xv = tape.constant(x.clone());
        let y = slot
            .forward(&mut tape, &vars, xv, &mut LatentBus::new(), None)
            .map_err(|e| e.to_string())?;
        Ok(tape.value(y).clone())
    };
    let crossed = run(pathways.clone())?;
    ensure(crossed.all_finite() && max_diff(&crossed, &plain) > 1e-9, || {
        "identity pathways had no effect".into()
    })?;
    ensure(bits(&run(Vec::new())?) == bits(&plain), || {
        "removing pathways changed the output".into()
    })?;
    let mut zeroed = pathways;
    zeroed.iter_mut().for_each(|p| p.gate.set_zero());
    ensure(bits(&run(zeroed)?) == bits(&plain), || {
        "zeroed pathways changed the output".into()
    })?;
    Ok("routes in_1>out_2, in_2>out_1; identity addition ok; disabled pathways bitwise plain".into())
}

// ---- 8 -------------------------------------------------------------------

fn modadd_config() -> TrainConfig {
    let mut cfg = TrainConfig::new(5000, 3e-3, 256, 1);
    cfg.weight_decay = 1.0;
    cfg.warmup = 250;
    cfg.eval_interval = 250;
    cfg.stop_at_accuracy = Some(0.9);
    cfg
}

fn modadd_run(gate: Option<GateVariant>) -> Result<(History, Duration), String> {
    let task = make_task(&TaskSpec::ModAdd {
        modulus: 97,
        eval_fraction: 0.3,
        seed: 0,
    })
    .map_err(|e| e.to_string())?;
    let (input, head) = task.net_shape().expect("transformer task");
    let spec = NetSpec::Transformer(ModelSpec {
        input,
        head,
        depth: 2,
        block: BlockSpec::uniform(64, 4, LayerSpec::svd(16)),
        lax: gate.map_or_else(LaxSpec::default, LaxSpec::with_gate),
        seed: 0,
    });
    let mut net = build_net(&spec).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let hist = train(&mut net, &task, &modadd_config()).map_err(|e| e.to_string())?;
    Ok((hist, t.elapsed()))
}

fn loss_bits(h: &History) -> Vec<u64> {
    h.losses.iter().map(|x| x.to_bits()).collect()
}

fn training_smoke() -> Outcome {
    let variants = [
        None,
        Some(GateVariant::Identity),
        Some(GateVariant::Linear),
        Some(GateVariant::Tensor),
        Some(GateVariant::Dense),
    ];
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for v in variants {
        let name = v.map_or("base", GateVariant::name);
        let (hist, elapsed) = modadd_run(v)?;
        let (again, _) = modadd_run(v)?;
        let acc = hist.best_accuracy().unwrap_or(0.0);
        let reached = hist.evals.iter().find(|e| e.accuracy >= Some(0.9)).map(|e| e.step);
        println!(
            "    modadd {name:<8} steps {:>4}  eval acc {acc:.4}  first >= 0.9 at {reached:?}  {:.0}s",
            hist.losses.len(),
            elapsed.as_secs_f64()
        );
        if hist.abort.is_some() || acc < 0.9 {
            failures.push(format!("{name} reached only {acc:.3}"));
        }
        if loss_bits(&hist) != loss_bits(&again) {
            failures.push(format!("{name} rerun differs"));
        }
        if elapsed.as_secs_f64() >= 900.0 {
            failures.push(format!("{name} took {:.0}s", elapsed.as_secs_f64()));
        }
        rows.push(format!("{name} {reached:?}"));
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!(
        "all 5 variants >= 90% and bitwise reproducible; steps to 90%: {}",
        rows.join(", ")
    ))
}

// ---- 9 -------------------------------------------------------------------

fn flops_properties() -> Outcome {
    let n = 197;
    let mut excluded = Vec::new();
    for r in 1..=256 {
        if most_square_fold(r).0 < 2 {
            // prime or tiny ranks fold as (1, r), where the tensor gate is no
            // cheaper than a dense one
            excluded.push(r);
            continue;
        }
        let f: Vec<u64> = GateVariant::ALL
            .iter()
            .map(|&v| GateShape::new(v, r, r).unwrap().flops(n))
            .collect();
        ensure(f.windows(2).all(|w| w[0] <= w[1]), || format!("rank {r}: {f:?}"))?;
    }
    let svd = |d_in, d_out, rank, n| LayerShape::Svd { d_in, d_out, rank }.flops(n);
    for (d_in, d_out) in [(64, 64), (768, 3072), (5, 11)] {
        for r in [1, 7, 16, 256] {
            for n in [1, 3, 197] {
                let one = svd(d_in, d_out, 1, 1);
                ensure(svd(d_in, d_out, r, n) == one * (r * n) as u64, || {
                    format!("svd {d_in} {d_out} {r} {n}")
                })?;
                ensure(svd(d_in, d_out, 2 * r, n) == 2 * svd(d_in, d_out, r, n), || {
                    format!("r-linearity {r}")
                })?;
                ensure(svd(d_in, d_out, r, 2 * n) == 2 * svd(d_in, d_out, r, n), || {
                    format!("n-linearity {n}")
                })?;
            }
        }
    }
    Ok(format!(
        "ordering holds for {} ranks in 1..=256 (skipped {} ranks with fold (1, r)); svd flops linear in r and n",
        256 - excluded.len(),
        excluded.len()
    ))
}

// ---- 10 ------------------------------------------------------------------

fn lora_base() -> ModelSpec {
    ModelSpec {
        input: InputKind::Tokens { vocab: 6, max_len: 6 },
        head: HeadKind::Lm { vocab: 6 },
        depth: 3,
        block: BlockSpec::uniform(8, 2, LayerSpec::dense()),
        lax: LaxSpec::default(),
        seed: 10,
    }
}

fn lora_spec(lax: LaxSpec) -> LoraSpec {
    LoraSpec {
        rank: 2,
        alpha: None,
        targets: vec!["qkv".into(), "o".into(), "up".into(), "down".into()],
        lax,
        seed: 11,
    }
}

fn lora_wrap() -> Outcome {
    let base = build_model(&lora_base()).map_err(|e| e.to_string())?;
    let input = Input::Tokens {
        ids: (0..12).map(|i| (i * 7) % 6).collect(),
        batch: 2,
    };
    let plain = Net::Transformer(base.clone());
    let want = model_forward(&plain, &input, false).map_err(|e| e.to_string())?.logits;
    let mut worst: f64 = 0.0;
    let mut laxes = vec![LaxSpec::default()];
    laxes.extend(GateVariant::ALL.map(LaxSpec::with_gate));
    for lax in laxes {
        let wrapped = Net::Transformer(wrap_lora(&base, &lora_spec(lax)).map_err(|e| e.to_string())?);
        let got = model_forward(&wrapped, &input, false)
            .map_err(|e| e.to_string())?
            .logits;
        worst = worst.max(max_diff(&got, &want));
    }
    ensure(worst == 0.0, || format!("zero-init adapters moved logits by {worst:e}"))?;

    let task = make_task(&TaskSpec::Copy {
        vocab: 6,
        half_len: 3,
        eval_size: 32,
        seed: 12,
    })
    .map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::new(60, 1e-2, 16, 13);
    cfg.warmup = 5;
    cfg.eval_interval = 20;
    let mut off = LaxSpec::with_gate(GateVariant::Linear);
    off.beta = 0.0;
    off.train_gates = false;
    let run = |lax: LaxSpec| -> Result<(History, Net), String> {
        let mut net = Net::Transformer(wrap_lora(&base, &lora_spec(lax)).map_err(|e| e.to_string())?);
        let hist = train(&mut net, &task, &cfg).map_err(|e| e.to_string())?;
        Ok((hist, net))
    };
    let (h_plain, n_plain) = run(LaxSpec::default())?;
    let (h_off, n_off) = run(off)?;
    ensure(n_off.lax_param_count() > 0, || "no gates were wired".into())?;
    ensure(h_plain.losses.last() < h_plain.losses.first(), || {
        "LoRA did not train".into()
    })?;
    ensure(loss_bits(&h_plain) == loss_bits(&h_off), || {
        "loss sequences differ".into()
    })?;
    let adapters = |n: &Net| -> Vec<u64> {
        n.slots()
            .iter()
            .filter_map(|s| match &s.layer {
                Linear::Lora(l) => Some(bits(&l.a).into_iter().chain(bits(&l.b))),
                _ => None,
            })
            .flatten()
            .collect()
    };
    ensure(adapters(&n_plain) == adapters(&n_off), || {
        "trained adapters differ".into()
    })?;
    Ok(format!(
        "zero-init adapters exact across 5 wirings; {} beta=0 steps bitwise equal to plain adapters",
        h_plain.losses.len()
    ))
}

// --------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("fused forward equals stacked weight", stacked_form),
        ("tensor-train forward and reconstruction", tt_correctness),
        ("gradient checks", gradient_checks),
        ("parameter formulas", parameter_formulas),
        ("ViT-B-shaped totals", vit_totals),
        ("zero-residual degeneracy", zero_residual),
        ("intra-layer TT pathways", intra_tt),
        ("modadd training smoke", training_smoke),
        ("FLOPs properties", flops_properties),
        ("LoRA wrap", lora_wrap),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

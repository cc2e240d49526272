//! Random network specs and brute-force parameter enumeration shared by
//! the accounting and acceptance targets.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lax_core::accounting::{model_overhead, AccountingReport, GateShape, LayerShape};
use lax_core::lax::{GateVariant, LaxSlot, NormPlacement};
use lax_core::nets::*;
use lax_core::numerics::{Activation, Binder, Tape};

const GATES: [GateVariant; 4] = [
    GateVariant::Identity,
    GateVariant::Linear,
    GateVariant::Tensor,
    GateVariant::Dense,
];

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

fn layer(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, allow_dense: bool) -> LayerSpec {
    match rng.random_range(if allow_dense { 0 } else { 1 }..4) {
        0 => LayerSpec::dense(),
        1 => LayerSpec::svd(rng.random_range(1..5)),
        2 => LayerSpec::cola(
            rng.random_range(1..5),
            *[Activation::Gelu, Activation::Relu, Activation::Identity]
                .choose(rng)
                .unwrap(),
        ),
        _ => {
            let a = *divisors(d_out).choose(rng).unwrap();
            let b = *divisors(d_in).choose(rng).unwrap();
            if rng.random_bool(0.5) {
                LayerSpec::tt(&[d_out], &[d_in], &[1, rng.random_range(1..4), 1])
            } else {
                let mut r = || rng.random_range(1..4);
                let ranks = [1, r(), r(), r(), 1];
                LayerSpec::tt(&[a, d_out / a], &[b, d_in / b], &ranks)
            }
        }
    }
}

fn lax(rng: &mut ChaCha8Rng, streams: &[&str]) -> LaxSpec {
    let mut l = LaxSpec::with_gate(*GATES.choose(rng).unwrap());
    l.enabled = rng.random_bool(0.8);
    if rng.random_bool(0.3) {
        l.gates
            .insert(streams.choose(rng).unwrap().to_string(), *GATES.choose(rng).unwrap());
    }
    if rng.random_bool(0.3) {
        l.streams = Some(
            streams
                .iter()
                .filter(|_| rng.random_bool(0.6))
                .map(|s| s.to_string())
                .collect(),
        );
    }
    l.norm = [
        None,
        Some(NormPlacement::Off),
        Some(NormPlacement::Latent),
        Some(NormPlacement::Output),
    ]
    .choose(rng)
    .copied()
    .unwrap();
    l.intra_tt = rng.random_bool(0.3);
    l.intra_gate = *GATES.choose(rng).unwrap();
    l.train_gates = rng.random_bool(0.8);
    l
}

pub fn random_case(seed: u64) -> (NetSpec, Option<LoraSpec>) {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(0.25) {
        let width = *[4, 6, 8].choose(rng).unwrap();
        let spec = ChainSpec {
            width,
            depth: rng.random_range(1..5),
            layer: layer(rng, width, width, true),
            activation: Activation::Identity,
            lax: lax(rng, &["chain"]),
            seed,
        };
        return (NetSpec::Chain(spec), None);
    }
    let width = *[4, 6, 8].choose(rng).unwrap();
    let adapters = rng.random_bool(0.25);
    let mlp_ratio = rng.random_range(1..3);
    let qkv_layout = if rng.random_bool(0.5) {
        QkvLayout::Fused
    } else {
        QkvLayout::Separate
    };
    let qkv_out = if qkv_layout == QkvLayout::Fused {
        3 * width
    } else {
        width
    };
    let hidden = width * mlp_ratio;
    let mut pick = |d_in, d_out| {
        if adapters {
            LayerSpec::dense()
        } else {
            layer(rng, d_in, d_out, true)
        }
    };
    let (qkv, proj, up, down) = (
        pick(width, qkv_out),
        pick(width, width),
        pick(width, hidden),
        pick(hidden, width),
    );
    let input = if rng.random_bool(0.5) {
        InputKind::Tokens {
            vocab: rng.random_range(3..8),
            max_len: rng.random_range(2..6),
        }
    } else {
        InputKind::Patches {
            patch_dim: rng.random_range(2..6),
            num_patches: rng.random_range(1..5),
            cls_token: rng.random_bool(0.5),
        }
    };
    let head = if rng.random_bool(0.5) {
        HeadKind::Lm {
            vocab: rng.random_range(2..8),
        }
    } else {
        HeadKind::Classify {
            classes: rng.random_range(2..8),
            readout: Readout::Last,
        }
    };
    let spec = ModelSpec {
        input,
        head,
        depth: rng.random_range(1..4),
        block: BlockSpec {
            width,
            heads: *[1, 2].choose(rng).unwrap(),
            mlp_ratio,
            qkv_layout,
            qkv,
            proj,
            mlp_up: up,
            mlp_down: down,
            attention: if rng.random_bool(0.7) {
                AttentionKind::Softmax
            } else {
                AttentionKind::Bypass
            },
        },
        lax: lax(rng, &["qkv", "q", "k", "v", "proj", "mlp_up", "mlp_down"]),
        seed,
    };
    let lora = adapters.then(|| {
        let roles: &[&str] = match qkv_layout {
            QkvLayout::Fused => &["qkv", "o", "up", "down"],
            QkvLayout::Separate => &["q", "k", "v", "o", "up", "down"],
        };
        let mut targets: Vec<String> = roles
            .iter()
            .filter(|_| rng.random_bool(0.5))
            .map(|s| s.to_string())
            .collect();
        if targets.is_empty() {
            targets.push(roles[0].to_string());
        }
        let streams: Vec<String> = targets.iter().map(|t| format!("lora:{t}")).collect();
        let refs: Vec<&str> = streams.iter().map(String::as_str).collect();
        LoraSpec {
            rank: rng.random_range(1..4),
            alpha: None,
            targets,
            lax: lax(rng, &refs),
            seed: seed + 1,
        }
    });
    (NetSpec::Transformer(spec), lora)
}

pub fn build(spec: &NetSpec, lora: Option<&LoraSpec>) -> lax_core::Result<Net> {
    let net = build_net(spec)?;
    match (net, lora) {
        (Net::Transformer(m), Some(l)) => Ok(Net::Transformer(wrap_lora(&m, l)?)),
        (net, _) => Ok(net),
    }
}

/// (trainable, total) element counts from binding `f` on a fresh tape.
pub fn bound_counts(f: impl FnOnce(&mut Binder)) -> (usize, usize) {
    let mut tape = Tape::new();
    let mut b = Binder::new(&mut tape);
    f(&mut b);
    let params = b.finish();
    let len = |p: &lax_core::numerics::BoundParam| tape.value(p.var).len();
    (
        params.iter().filter(|p| p.trainable).map(len).sum(),
        params.iter().map(len).sum(),
    )
}

fn compare_slot(s: &LaxSlot, report: &AccountingReport) {
    let row = report.layer(&s.id).unwrap_or_else(|| panic!("no row for {}", s.id));
    assert_eq!(row.shape, LayerShape::of(&s.layer), "{}", s.id);
    assert_eq!(row.stream, s.stream, "{}", s.id);
    let gates: Vec<_> = report.gates.iter().filter(|g| g.slot == s.id).collect();
    let pathways: Vec<_> = s.inter.iter().chain(&s.intra).collect();
    assert_eq!(gates.len(), pathways.len(), "{}", s.id);
    let mut gate_train = 0;
    let mut gate_total = 0;
    for (g, p) in gates.iter().zip(&pathways) {
        assert_eq!(
            (g.source.as_str(), g.target.as_str()),
            (p.source_label.as_str(), p.target_label.as_str())
        );
        assert_eq!(g.gate, GateShape::of(&p.gate), "{}", s.id);
        assert_eq!(g.norm, p.placement());
        assert_eq!(g.trainable, p.gate.trainable);
        let (t, all) = bound_counts(|b| {
            p.bind(b);
        });
        assert_eq!(g.params + g.norm_params, all, "{}", s.id);
        assert_eq!(g.norm_params + if g.trainable { g.params } else { 0 }, t, "{}", s.id);
        gate_train += t;
        gate_total += all;
    }
    let (t, all) = bound_counts(|b| {
        s.bind(b);
    });
    assert_eq!(row.trainable + gate_train, t, "{}", s.id);
    assert_eq!(row.total + gate_total, all, "{}", s.id);
}

/// Checks accounting against the built network for `seeds` random specs;
/// panics on the first disagreement. Returns `(built, rejected)`.
pub fn brute_force(seeds: u64) -> (usize, usize) {
    let (mut built, mut rejected) = (0, 0);
    for seed in 0..seeds {
        let (spec, lora) = random_case(seed);
        let report = model_overhead(&spec, lora.as_ref(), 3);
        let net = build(&spec, lora.as_ref());
        let (report, net) = match (report, net) {
            (Ok(r), Ok(n)) => (r, n),
            (Err(_), Err(_)) => {
                rejected += 1;
                continue;
            }
            (r, n) => panic!("seed {seed}: accounting {:?} but build {:?}", r.err(), n.err()),
        };
        built += 1;
        let slots = net.slots();
        assert_eq!(slots.len(), report.layers.len(), "seed {seed}");
        for (s, row) in slots.iter().zip(&report.layers) {
            assert_eq!(s.id, row.id, "seed {seed}");
            compare_slot(s, &report);
        }
        let loose: Vec<(String, usize)> = net
            .parts()
            .into_iter()
            .filter_map(|p| match p {
                PartRef::Tensor(name, t) => Some((name, t.len())),
                PartRef::Slot(_) => None,
            })
            .collect();
        let listed: Vec<(String, usize)> = report.tensors.iter().map(|t| (t.name.clone(), t.params)).collect();
        assert_eq!(loose, listed, "seed {seed}");

        let (trainable, total) = bound_counts(|b| {
            net.bind(b);
        });
        assert_eq!(report.trainable_params, trainable, "seed {seed}");
        assert_eq!(report.total_params, total, "seed {seed}");
        assert_eq!(report.trainable_params, net.param_count(), "seed {seed}");
        assert_eq!(report.total_params, net.total_param_count(), "seed {seed}");
        assert_eq!(report.lax_params, net.lax_param_count(), "seed {seed}");
    }
    (built, rejected)
}

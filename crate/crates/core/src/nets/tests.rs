use super::*;
use crate::lax::{GateVariant, NormPlacement};
use crate::numerics::ops::matmul;
use crate::numerics::Init;

fn chain_spec(depth: usize, lax: LaxSpec, seed: u64) -> ChainSpec {
    ChainSpec {
        width: 6,
        depth,
        layer: LayerSpec::svd(3),
        activation: crate::numerics::Activation::Identity,
        lax,
        seed,
    }
}

fn lm_spec(lax: LaxSpec, seed: u64) -> ModelSpec {
    ModelSpec {
        input: InputKind::Tokens { vocab: 7, max_len: 5 },
        head: HeadKind::Lm { vocab: 7 },
        depth: 2,
        block: BlockSpec::uniform(8, 2, LayerSpec::svd(3)),
        lax,
        seed,
    }
}

fn tokens(batch: usize, t: usize) -> Input {
    Input::Tokens {
        ids: (0..batch * t).map(|i| (i * 5 + 2) % 7).collect(),
        batch,
    }
}

fn logits(net: &Net, input: &Input) -> Tensor {
    model_forward(net, input, false).unwrap().logits
}

fn no_norm(gate: GateVariant) -> LaxSpec {
    LaxSpec {
        norm: Some(NormPlacement::Off),
        ..LaxSpec::with_gate(gate)
    }
}

#[test]
fn single_layer_chain_is_unchanged_by_wiring() {
    let x = Input::Features(Init::new(1).normal("x", &[3, 6], 1.0));
    let plain = build_net(&NetSpec::Chain(chain_spec(1, LaxSpec::default(), 4))).unwrap();
    let wired = build_net(&NetSpec::Chain(chain_spec(
        1,
        LaxSpec::with_gate(GateVariant::Dense),
        4,
    )))
    .unwrap();
    assert_eq!(wired.lax_param_count(), 0);
    assert_eq!(logits(&plain, &x), logits(&wired, &x));
}

#[test]
fn identity_gate_adds_previous_latent() {
    let x = Input::Features(Init::new(2).normal("x", &[3, 6], 1.0));
    let net = build_net(&NetSpec::Chain(chain_spec(2, no_norm(GateVariant::Identity), 5))).unwrap();
    let out = model_forward(&net, &x, true).unwrap();
    let h0 = out.trace[0].get("h").unwrap();
    let h1 = out.trace[1].get("h").unwrap();
    let Linear::Svd(l1) = &net.layers()[1] else { panic!() };
    let z = h0.zip_map(h1, |a, b| a + b).unwrap();
    let want = matmul(&z, &l1.b.t().unwrap()).unwrap();
    assert!(out.logits.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn equal_latents_are_doubled() {
    let mut net = build_net(&NetSpec::Chain(chain_spec(2, no_norm(GateVariant::Identity), 5))).unwrap();
    let pick = Tensor::from_fn(&[3, 6], |i| if i % 6 == i / 6 { 1.0 } else { 0.0 });
    {
        let mut slots = net.slots_mut();
        let Linear::Svd(l0) = &mut slots[0].layer else { panic!() };
        l0.a = pick.clone();
        l0.b = pick.t().unwrap();
        let Linear::Svd(l1) = &mut slots[1].layer else { panic!() };
        l1.a = pick.clone();
    }
    let x = Init::new(2).normal("x", &[3, 6], 1.0);
    let out = model_forward(&net, &Input::Features(x.clone()), true).unwrap();
    let h = matmul(&x, &pick.t().unwrap()).unwrap();
    assert_eq!(out.trace[0].get("h").unwrap(), &h);
    assert_eq!(out.trace[1].get("h").unwrap(), &h);
    let Linear::Svd(l1) = &net.layers()[1] else { panic!() };
    let want = matmul(&h.map(|v| 2.0 * v), &l1.b.t().unwrap()).unwrap();
    assert!(out.logits.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn zero_beta_matches_plain_model_bitwise() {
    let input = tokens(2, 5);
    let plain = build_net(&NetSpec::Transformer(lm_spec(LaxSpec::default(), 3))).unwrap();
    let lax = LaxSpec {
        beta: 0.0,
        ..no_norm(GateVariant::Linear)
    };
    let wired = build_net(&NetSpec::Transformer(lm_spec(lax, 3))).unwrap();
    assert!(wired.lax_param_count() > 0);
    assert_eq!(logits(&plain, &input), logits(&wired, &input));

    for gate in [GateVariant::Identity, GateVariant::Tensor, GateVariant::Dense] {
        let mut net = build_net(&NetSpec::Transformer(lm_spec(no_norm(gate), 3))).unwrap();
        assert_ne!(logits(&plain, &input), logits(&net, &input), "{gate:?}");
        net.zero_gates();
        assert_eq!(logits(&plain, &input), logits(&net, &input), "{gate:?}");
    }
}

#[test]
fn logits_finite_across_seeds_and_gates() {
    let input = tokens(2, 5);
    for seed in 0..20 {
        for gate in GateVariant::ALL {
            let net = build_net(&NetSpec::Transformer(lm_spec(LaxSpec::with_gate(gate), seed))).unwrap();
            let y = logits(&net, &input);
            assert_eq!(y.shape(), &[2, 5, 7]);
            assert!(y.all_finite(), "seed {seed} gate {gate:?}");
        }
    }
}

#[test]
fn classifier_over_patches() {
    let spec = ModelSpec {
        input: InputKind::Patches {
            patch_dim: 12,
            num_patches: 4,
            cls_token: true,
        },
        head: HeadKind::Classify {
            classes: 3,
            readout: Readout::First,
        },
        depth: 1,
        block: BlockSpec {
            qkv_layout: QkvLayout::Separate,
            ..BlockSpec::uniform(8, 2, LayerSpec::cola(2, crate::numerics::Activation::Gelu))
        },
        lax: LaxSpec::with_gate(GateVariant::Tensor),
        seed: 0,
    };
    let net = build_net(&NetSpec::Transformer(spec)).unwrap();
    let x = Input::Patches {
        x: Init::new(3).normal("p", &[2 * 4, 12], 1.0),
        batch: 2,
    };
    let y = logits(&net, &x);
    assert_eq!(y.shape(), &[2, 3]);
    assert!(y.all_finite());
}

#[test]
fn zero_init_adapters_reproduce_base_model() {
    let input = tokens(2, 5);
    let mut spec = lm_spec(LaxSpec::default(), 8);
    spec.block = BlockSpec::uniform(8, 2, LayerSpec::dense());
    let base = build_model(&spec).unwrap();
    // per block: qkv 2·8 + 24·2, up 2·8 + 32·2, down 2·32 + 8·2; dense 2x2
    // gates on the second block's three streams
    for (lax, trainable) in [(LaxSpec::default(), 448), (no_norm(GateVariant::Dense), 448 + 12)] {
        let lora = LoraSpec {
            rank: 2,
            alpha: None,
            targets: vec!["qkv".into(), "up".into(), "down".into()],
            lax,
            seed: 1,
        };
        let wrapped = Net::Transformer(wrap_lora(&base, &lora).unwrap());
        let base = Net::Transformer(base.clone());
        let d = logits(&base, &input).max_abs_diff(&logits(&wrapped, &input)).unwrap();
        assert!(d <= 1e-12, "{d}");
        assert_eq!(wrapped.param_count(), trainable);
        assert_eq!(
            wrapped.total_param_count() - wrapped.param_count(),
            base.total_param_count()
        );
    }
}

#[test]
fn adapter_targets_validated() {
    let mut spec = lm_spec(LaxSpec::default(), 8);
    spec.block = BlockSpec::uniform(8, 2, LayerSpec::dense());
    let base = build_model(&spec).unwrap();
    let lora = |t: &str| LoraSpec {
        rank: 2,
        alpha: None,
        targets: vec![t.into()],
        lax: LaxSpec::default(),
        seed: 1,
    };
    assert!(wrap_lora(&base, &lora("q")).is_err());
    assert!(wrap_lora(&base, &lora("gate")).is_err());
    assert!(wrap_lora(&base, &lora("o")).is_ok());
    let low = build_model(&lm_spec(LaxSpec::default(), 8)).unwrap();
    assert!(wrap_lora(&low, &lora("o")).is_err());
}

#[test]
fn tensors_align_with_bindings() {
    for lax in [LaxSpec::default(), LaxSpec::with_gate(GateVariant::Tensor)] {
        let mut net = build_net(&NetSpec::Transformer(lm_spec(lax, 2))).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        net.bind(&mut b);
        let params = b.finish();
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| tape.shape(p.var).to_vec()).collect();
        let tensors = net.tensors_mut();
        assert_eq!(shapes.len(), tensors.len());
        for (s, t) in shapes.iter().zip(&tensors) {
            assert_eq!(s.as_slice(), t.shape());
        }
        let n: usize = tensors.iter().map(|t| t.len()).sum();
        assert_eq!(n, net.total_param_count());
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let input = tokens(1, 5);
    let mut lax = LaxSpec::with_gate(GateVariant::Dense);
    lax.gates.insert("mlp_up".into(), GateVariant::Linear);
    lax.gates.insert("mlp_down".into(), GateVariant::Tensor);
    let mut net = build_net(&NetSpec::Transformer(lm_spec(lax, 6))).unwrap();
    for (i, t) in net.tensors_mut().into_iter().enumerate() {
        let d = t.data_mut();
        d[0] += 0.01 * i as f64;
    }
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, net);
    assert_eq!(logits(&back, &input), logits(&net, &input));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(crate::LaxError::Format(_))));
}

#[test]
fn adapter_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = lm_spec(LaxSpec::default(), 8);
    spec.block = BlockSpec::uniform(8, 2, LayerSpec::dense());
    let base = build_model(&spec).unwrap();
    let lora = LoraSpec {
        rank: 2,
        alpha: Some(3.0),
        targets: vec!["qkv".into(), "o".into()],
        lax: LaxSpec {
            train_gates: false,
            ..no_norm(GateVariant::Linear)
        },
        seed: 1,
    };
    let mut net = Net::Transformer(wrap_lora(&base, &lora).unwrap());
    for t in net.tensors_mut() {
        t.data_mut()[0] -= 0.5;
    }
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&net, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), net);
}

#[test]
fn streams_only_connect_same_position() {
    let mut block = BlockSpec::uniform(8, 2, LayerSpec::svd(3));
    block.mlp_up = LayerSpec::svd(5);
    block.mlp_down = LayerSpec::svd(4);
    block.proj = LayerSpec::svd(2);
    let mut spec = lm_spec(LaxSpec::with_gate(GateVariant::Identity), 1);
    spec.block = block;
    spec.depth = 3;
    let net = build_net(&NetSpec::Transformer(spec.clone())).unwrap();
    let slots = net.slots();
    for (i, s) in slots.iter().enumerate() {
        let Some(p) = &s.inter else { continue };
        let prev = slots[..i]
            .iter()
            .rev()
            .find(|o| o.stream.is_some() && o.stream == s.stream)
            .expect("pathway without an upstream slot");
        assert_eq!(p.gate.source_rank(), prev.layer.latent_rank().unwrap(), "{}", s.id);
    }
    assert!(slots.iter().all(|s| s.stream.as_deref() != Some("proj")));
    let wired = slots.iter().filter(|s| s.inter.is_some()).count();
    assert_eq!(wired, 2 * 3);
    let out = model_forward(&net, &tokens(1, 5), true).unwrap();
    assert!(out.logits.all_finite());

    // with the output projection on its own stream, still no cross-talk
    spec.lax.streams = Some(vec!["proj".into(), "mlp_up".into()]);
    let net = build_net(&NetSpec::Transformer(spec)).unwrap();
    let wired: Vec<&str> = net
        .slots()
        .iter()
        .filter(|s| s.inter.is_some())
        .map(|s| s.id.as_str())
        .collect();
    assert_eq!(
        wired,
        ["blocks.1.proj", "blocks.1.mlp_up", "blocks.2.proj", "blocks.2.mlp_up"]
    );
}

#[test]
fn bypass_attention_forwards_values() {
    let mut spec = lm_spec(LaxSpec::default(), 0);
    spec.block.attention = AttentionKind::Bypass;
    spec.block.qkv_layout = QkvLayout::Separate;
    spec.depth = 1;
    let net = build_net(&NetSpec::Transformer(spec)).unwrap();
    // each position only sees itself, so a prefix has the same logits
    let long = logits(&net, &tokens(1, 5));
    let Input::Tokens { ids, .. } = tokens(1, 5) else {
        unreachable!()
    };
    let mut shuffled = ids.clone();
    shuffled.swap(0, 1);
    let other = logits(
        &net,
        &Input::Tokens {
            ids: shuffled,
            batch: 1,
        },
    );
    for t in 2..5 {
        for v in 0..7 {
            assert!((long.get(&[0, t, v]) - other.get(&[0, t, v])).abs() < 1e-12);
        }
    }
}

#[test]
fn construction_is_deterministic() {
    let a = build_net(&NetSpec::Transformer(lm_spec(
        LaxSpec::with_gate(GateVariant::Tensor),
        11,
    )))
    .unwrap();
    let b = build_net(&NetSpec::Transformer(lm_spec(
        LaxSpec::with_gate(GateVariant::Tensor),
        11,
    )))
    .unwrap();
    let c = build_net(&NetSpec::Transformer(lm_spec(
        LaxSpec::with_gate(GateVariant::Tensor),
        12,
    )))
    .unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let input = tokens(2, 5);
    assert_eq!(logits(&a, &input), logits(&b, &input));
}

#[test]
fn spec_json_roundtrips() {
    let spec = NetSpec::Transformer(lm_spec(LaxSpec::with_gate(GateVariant::Dense), 3));
    let s = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<NetSpec>(&s).unwrap(), spec);
}

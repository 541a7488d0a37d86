mod common;

use common::*;
use gated_vpt::prompt::*;
use gated_vpt::train::{loss_and_grads, sgd_step};
use gated_vpt::vit::{TrainableMask, ViTConfig};
use gated_vpt::{Error, Tape, Tensor};
use std::collections::BTreeMap;

fn opts() -> ForwardOptions {
    ForwardOptions::default()
}

fn with_gates(g: Vec<f64>) -> ForwardOptions {
    ForwardOptions {
        gate_override: Some(g),
        ..Default::default()
    }
}

#[test]
fn scalar_gate_blend() {
    let tape = Tape::new();
    let g = tape.scalar(0.25);
    let before = tape.constant(Tensor::full([1, 1], 2.0));
    let after = tape.constant(Tensor::full([1, 1], 6.0));
    assert_eq!(gate_blend(&g, &after, &before).unwrap().item(), 3.0);
}

#[test]
fn all_open_gates_reduce_to_shallow() {
    let cfg = small_vit();
    for seed in 0..5 {
        let m = gated(&cfg, 3, seed % 2 == 0, seed);
        let x = images(&cfg, 3, seed);
        let (logits, _) = gated_forward(&m, &x, &with_gates(vec![1.0; 3])).unwrap();
        let shallow = vpt_shallow_forward(&m, &x, &opts()).unwrap();
        assert!(logits.bit_eq(&shallow), "seed {seed}");
    }
}

#[test]
fn fixed_gate_mode_matches_override() {
    let cfg = small_vit();
    let mut tuning = TuningConfig::new(TuningMode::Gated, 2).with_gate_mode(GateMode::Fixed);
    tuning.fixed_gate_value = 1.0;
    let m = model(&cfg, tuning, 4);
    let x = images(&cfg, 2, 4);
    let a = m.forward(&x, &opts()).unwrap().logits;
    assert!(a.bit_eq(&vpt_shallow_forward(&m, &x, &opts()).unwrap()));
}

#[test]
fn closed_gate_skips_prompt_update() {
    let cfg = small_vit();
    let m = gated(&cfg, 3, false, 1);
    let x = images(&cfg, 2, 9);
    for l in 0..cfg.num_blocks - 1 {
        let mut g = vec![0.7; cfg.num_blocks - 1];
        g[l] = 0.0;
        let (_, trace) = gated_forward(&m, &x, &with_gates(g)).unwrap();
        let entering_l = &trace.blocks[l].input;
        let entering_next = &trace.blocks[l + 1].input;
        assert!(entering_l.max_abs_diff(entering_next) <= 1e-12, "block {l}");
        // The block itself still transformed its prompt outputs.
        assert!(trace.blocks[l].output.max_abs_diff(entering_l) > 1e-6);
    }
}

#[test]
fn closed_gate_still_updates_cls_and_patches() {
    let cfg = small_vit();
    let m = gated(&cfg, 2, false, 2);
    let x = images(&cfg, 1, 2);
    let a = gated_forward(&m, &x, &with_gates(vec![0.0; 3])).unwrap().0;
    let b = gated_forward(&m, &x, &with_gates(vec![1.0; 3])).unwrap().0;
    // Different prompt paths, same backbone: logits differ but both finite.
    assert!(a.max_abs_diff(&b) > 0.0);
    a.ensure_finite("logits").unwrap();
}

#[test]
fn soft_gating_is_a_convex_combination() {
    let cfg = small_vit();
    let mut m = gated(&cfg, 3, false, 5);
    randomize(&mut m, GATE_PRIOR, 3.0, 6);
    let (_, trace) = gated_forward(&m, &images(&cfg, 2, 5), &opts()).unwrap();
    for e in &trace.blocks[..cfg.num_blocks - 1] {
        let gated = e.gated.as_ref().unwrap();
        for ((z, a), b) in gated.data().iter().zip(e.output.data()).zip(e.input.data()) {
            assert!(*z >= a.min(*b) - 1e-15 && *z <= a.max(*b) + 1e-15);
        }
    }
    assert!(trace.blocks.last().unwrap().gated.is_none());
}

#[test]
fn sequence_length_includes_prompts() {
    let cfg = small_vit();
    let m = gated(&cfg, 5, false, 0);
    let out = m
        .forward(
            &images(&cfg, 2, 0),
            &ForwardOptions {
                capture_attention: true,
                ..Default::default()
            },
        )
        .unwrap();
    assert_eq!(out.attention.len(), cfg.num_blocks);
    for a in &out.attention {
        assert_eq!(a.scores.shape(), &[2, cfg.num_heads, 1 + 5 + cfg.num_patches(), 1 + 5 + cfg.num_patches()]);
    }
}

#[test]
fn zero_prompts_rejected_for_every_mode() {
    let cfg = small_vit();
    let backbone = gated_vpt::vit::init_params(&cfg, 0).unwrap();
    for mode in [TuningMode::Shallow, TuningMode::Deep, TuningMode::Gated] {
        let r = TunedModel::new(cfg.clone(), TuningConfig::new(mode, 0), &backbone, 0, 0);
        assert!(matches!(r, Err(Error::Config(_))), "{mode}");
    }
}

#[test]
fn deep_with_one_block_equals_shallow() {
    let cfg = ViTConfig {
        num_blocks: 1,
        ..small_vit()
    };
    let deep = model(&cfg, TuningConfig::new(TuningMode::Deep, 3), 3);
    let mut shallow = model(&cfg, TuningConfig::new(TuningMode::Shallow, 3), 3);
    shallow
        .params
        .insert(PROMPT_TOKENS, deep.params.get(&deep_prompt_name(0)).unwrap().clone());
    let x = images(&cfg, 2, 3);
    let a = vpt_deep_forward(&deep, &x, &opts()).unwrap();
    let b = vpt_shallow_forward(&shallow, &x, &opts()).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn deep_prompts_only_affect_their_block_onwards() {
    let cfg = small_vit();
    let base = model(&cfg, TuningConfig::new(TuningMode::Deep, 2), 8);
    let x = images(&cfg, 2, 8);
    let capture = ForwardOptions {
        capture_trace: true,
        ..Default::default()
    };
    let reference = base.forward(&x, &capture).unwrap().trace.unwrap();
    let l = cfg.num_blocks;
    for target in [0, l - 1] {
        let mut m = base.clone();
        m.params.get_mut(&deep_prompt_name(target)).unwrap().data_mut()[0] += 0.5;
        let trace = m.forward(&x, &capture).unwrap().trace.unwrap();
        for b in 0..l {
            let same = trace.blocks[b].output.bit_eq(&reference.blocks[b].output);
            assert_eq!(same, b < target, "perturbing P{target}, block {b}");
        }
    }
}

#[test]
fn deep_gradients_reach_every_prompt_set() {
    let cfg = small_vit();
    let m = model(&cfg, TuningConfig::new(TuningMode::Deep, 2), 11);
    let (x, y) = (images(&cfg, 3, 11), labels(&cfg, 3, 11));
    let (_, grads) = loss_and_grads(&m, &x, &y, &opts()).unwrap();
    for l in 0..cfg.num_blocks {
        let name = deep_prompt_name(l);
        let g = &grads[&name];
        assert!(g.data().iter().any(|v| *v != 0.0), "{name}");
        // finite-difference spot check on two entries
        for idx in [0, g.len() - 1] {
            let h = 1e-5;
            let mut plus = m.clone();
            plus.params.get_mut(&name).unwrap().data_mut()[idx] += h;
            let mut minus = m.clone();
            minus.params.get_mut(&name).unwrap().data_mut()[idx] -= h;
            let fp = gated_vpt::train::loss_value(&plus, &x, &y, &opts()).unwrap();
            let fm = gated_vpt::train::loss_value(&minus, &x, &y, &opts()).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            assert!((numeric - g.data()[idx]).abs() < 1e-7, "{name}[{idx}]");
        }
    }
}

#[test]
fn missing_deep_prompts_is_config_error() {
    let cfg = small_vit();
    let mut m = model(&cfg, TuningConfig::new(TuningMode::Deep, 2), 1);
    m.params.remove(&deep_prompt_name(2));
    assert!(matches!(
        vpt_deep_forward(&m, &images(&cfg, 1, 0), &opts()),
        Err(Error::Config(_))
    ));
}

#[test]
fn gate_priors_receive_gradient() {
    let cfg = small_vit();
    let mut m = gated(&cfg, 3, true, 12);
    // Moderate priors keep sigmoid'(γ) away from zero.
    m.params.get_mut(GATE_PRIOR).unwrap().data_mut().fill(0.5);
    let (x, y) = (images(&cfg, 4, 12), labels(&cfg, 4, 12));
    let (_, grads) = loss_and_grads(&m, &x, &y, &opts()).unwrap();
    assert!(grads[GATE_PRIOR].data().iter().any(|v| v.abs() > 1e-8));
    assert!(grads[TEMP_LOG].data().iter().any(|v| v.abs() > 1e-8));
}

#[test]
fn hard_gates_are_binary_with_straight_through_gradient() {
    let cfg = small_vit();
    let mut m = model(
        &cfg,
        TuningConfig::new(TuningMode::Gated, 2).with_gate_mode(GateMode::Hard),
        13,
    );
    m.params.get_mut(GATE_PRIOR).unwrap().data_mut().fill(0.0);
    let (x, y) = (images(&cfg, 2, 13), labels(&cfg, 2, 13));
    let mut any_grad = false;
    for seed in 0..20 {
        let o = ForwardOptions {
            training: true,
            noise_seed: seed,
            capture_trace: true,
            ..Default::default()
        };
        let trace = m.forward(&x, &o).unwrap().trace.unwrap();
        for e in &trace.blocks[..cfg.num_blocks - 1] {
            let g = e.gate.unwrap();
            assert!(g == 0.0 || g == 1.0);
        }
        let (_, grads) = loss_and_grads(&m, &x, &y, &o).unwrap();
        any_grad |= grads[GATE_PRIOR].data().iter().any(|v| *v != 0.0);
    }
    assert!(any_grad);
    // inference: deterministic threshold
    let a = m.forward(&x, &opts()).unwrap().logits;
    let b = m.forward(&x, &opts()).unwrap().logits;
    assert!(a.bit_eq(&b));
}

#[test]
fn unit_temperature_matches_no_temperature() {
    let cfg = small_vit();
    let with = gated(&cfg, 2, true, 14);
    let mut without = with.clone();
    without.tuning.attention_shaping = false;
    without.params.remove(TEMP_LOG);
    let x = images(&cfg, 3, 14);
    let a = with.forward(&x, &opts()).unwrap().logits;
    let b = without.forward(&x, &opts()).unwrap().logits;
    assert!(a.bit_eq(&b));
}

#[test]
fn freezing_report() {
    let cfg = small_vit();
    let m = gated(&cfg, 2, true, 15);
    let ck = m.to_checkpoint();
    assert!(assert_frozen(&ck, &ck, &m.mask()).unwrap().passed());

    // ten optimizer steps touch only the mask
    let mut trained = m.clone();
    let mut vel = BTreeMap::new();
    let (x, y) = (images(&cfg, 4, 15), labels(&cfg, 4, 15));
    for _ in 0..10 {
        let (_, g) = loss_and_grads(&trained, &x, &y, &opts()).unwrap();
        sgd_step(&mut trained.params, &g, &m.mask(), 0.5, 0.9, &mut vel).unwrap();
    }
    let report = assert_frozen(&ck, &trained.to_checkpoint(), &m.mask()).unwrap();
    assert!(report.passed());
    assert!(report.checked > 0);
    assert!(!trained.params.get(PROMPT_TOKENS).unwrap().bit_eq(m.params.get(PROMPT_TOKENS).unwrap()));

    // negative control: a step that also updates the backbone
    let mut leaky = m.clone();
    let everything = TrainableMask::all(&leaky.params);
    let mut all_grads = BTreeMap::new();
    for (name, t) in leaky.params.iter() {
        all_grads.insert(name.to_string(), Tensor::full(t.shape(), 1e-3));
    }
    sgd_step(&mut leaky.params, &all_grads, &everything, 1.0, 0.0, &mut BTreeMap::new()).unwrap();
    let report = assert_frozen(&ck, &leaky.to_checkpoint(), &m.mask()).unwrap();
    assert!(report.violations.contains(&"blocks.0.attn.qkv.weight".to_string()));

    let other = gated(&ViTConfig { num_classes: 4, ..cfg }, 2, true, 15);
    assert!(matches!(
        assert_frozen(&ck, &other.to_checkpoint(), &m.mask()),
        Err(Error::Config(_))
    ));
}

#[test]
fn model_checkpoint_round_trip() {
    let cfg = small_vit();
    let m = gated(&cfg, 2, true, 16);
    let bytes = m.to_checkpoint().to_bytes().unwrap();
    let back = TunedModel::from_checkpoint(&gated_vpt::vit::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, m);
    let mut plain = m.to_checkpoint();
    plain.tuning = None;
    assert!(matches!(TunedModel::from_checkpoint(&plain), Err(Error::Mode(_))));
}

#[test]
fn shared_tuning_seed_shares_prompt_and_head_init() {
    let cfg = small_vit();
    let g = gated(&cfg, 3, false, 17);
    let s = model(&cfg, TuningConfig::new(TuningMode::Shallow, 3), 17);
    for name in [PROMPT_TOKENS, "head.weight", "head.bias"] {
        assert!(g.params.get(name).unwrap().bit_eq(s.params.get(name).unwrap()), "{name}");
    }
    let bound = (6.0 / (3.0 * 16.0 + 16.0f64)).sqrt();
    assert!(g.params.get(PROMPT_TOKENS).unwrap().data().iter().all(|v| v.abs() <= bound));
}

mod common;

use common::*;
use gated_vpt::analysis::*;
use gated_vpt::autodiff::sigmoid;
use gated_vpt::prompt::*;
use gated_vpt::train::inference_gates;
use gated_vpt::Error;
use proptest::prelude::*;

fn with_gates(g: Vec<f64>) -> ForwardOptions {
    ForwardOptions {
        gate_override: Some(g),
        ..Default::default()
    }
}

#[test]
fn closed_form_matches_sequential_gating() {
    let cfg = small_vit();
    for seed in 0..10 {
        let mut m = gated(&cfg, 2, false, seed);
        randomize(&mut m, GATE_PRIOR, 4.0, seed);
        let (_, trace) = gated_forward(&m, &images(&cfg, 2, seed), &ForwardOptions::default()).unwrap();
        let gates: Vec<f64> = trace.blocks[..cfg.num_blocks - 1].iter().map(|e| e.gate.unwrap()).collect();
        let agg = closed_form_aggregate(&trace, &gates).unwrap();
        assert!(agg.max_abs_diff(trace.final_input().unwrap()) < 1e-10, "seed {seed}");
    }
}

#[test]
fn closed_form_limits_are_exact() {
    let cfg = small_vit();
    let m = gated(&cfg, 2, false, 3);
    let x = images(&cfg, 2, 3);
    let (_, trace) = gated_forward(&m, &x, &with_gates(vec![1.0; 3])).unwrap();
    let agg = closed_form_aggregate(&trace, &[1.0; 3]).unwrap();
    assert!(agg.bit_eq(&trace.blocks[2].output));
    let (_, trace) = gated_forward(&m, &x, &with_gates(vec![0.0; 3])).unwrap();
    let agg = closed_form_aggregate(&trace, &[0.0; 3]).unwrap();
    assert!(agg.bit_eq(&trace.initial));
}

#[test]
fn closed_form_rejects_incomplete_trace() {
    let cfg = small_vit();
    let m = gated(&cfg, 2, false, 3);
    let (_, mut trace) = gated_forward(&m, &images(&cfg, 1, 3), &with_gates(vec![0.5; 3])).unwrap();
    trace.blocks.pop();
    assert!(matches!(closed_form_aggregate(&trace, &[0.5; 3]), Err(Error::State(_))));
}

#[test]
fn later_full_gate_erases_earlier_blocks() {
    let mut last = Vec::new();
    for g in [0.9, 0.99, 0.999] {
        let r = selection_ratio(&accumulated_weights(&[0.6, 0.3, 0.8, g]).unwrap()).unwrap();
        last.push(r);
    }
    for w in last.windows(2) {
        assert!(w[1][3] > w[0][3]);
        for l in 0..3 {
            assert!(w[1][l] < w[0][l]);
        }
    }
    assert!(last[2][3] > 0.99);
}

#[test]
fn report_gates_match_sigmoid_of_priors() {
    let cfg = small_vit();
    let mut m = gated(&cfg, 2, false, 4);
    randomize(&mut m, GATE_PRIOR, 3.0, 4);
    let gates = inference_gates(&m);
    let report = SelectionReport::from_gates("r", &gates).unwrap();
    for (g, p) in report.gates.iter().zip(m.params.get(GATE_PRIOR).unwrap().data()) {
        assert!((g - sigmoid(*p)).abs() < 1e-12);
    }
    let full = SelectionReport::from_gates("r", &[1.0, 1.0, 1.0]).unwrap();
    assert_eq!(full.ratios, vec![0.0, 0.0, 1.0]);
    assert_eq!(full.residual_weight, 0.0);
}

#[test]
fn attention_export_contract() {
    let cfg = small_vit();
    let m = gated(&cfg, 2, true, 5);
    let x = images(&cfg, 1, 5);
    let maps = attention_maps(&m, &[0, 3], &x).unwrap();
    assert_eq!(maps.len(), 2 * (cfg.num_heads + 1));
    for map in &maps {
        assert!((map.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(map.values.len(), cfg.grid() * cfg.grid());
        let csv = map.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with(&format!("block={},head=", map.block)));
        assert!(header.ends_with(&format!("rows={0}x{0}", cfg.grid())));
        assert_eq!(csv.lines().count(), 1 + cfg.grid());
    }
    let dir = tempfile::tempdir().unwrap();
    let first = export_attention_maps(&m, &[1], &x, dir.path().join("a")).unwrap();
    let second = export_attention_maps(&m, &[1], &x, dir.path().join("b")).unwrap();
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    assert!(matches!(
        attention_maps(&m, &[cfg.num_blocks], &x),
        Err(Error::OutOfBounds { .. })
    ));
}

#[test]
fn huge_temperature_gives_flat_maps() {
    let cfg = small_vit();
    let mut m = gated(&cfg, 2, true, 6);
    m.params.get_mut(TEMP_LOG).unwrap().data_mut().fill(1e6f64.ln());
    for map in attention_maps(&m, &[0, 1, 2, 3], &images(&cfg, 1, 6)).unwrap() {
        let max = map.values.iter().copied().fold(f64::MIN, f64::max);
        let min = map.values.iter().copied().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-3);
    }
}

proptest! {
    #[test]
    fn ratios_are_normalized(gates in prop::collection::vec(0.0f64..=1.0, 1..12)) {
        let acc = accumulated_weights(&gates).unwrap();
        prop_assert_eq!(acc[acc.len() - 1], gates[gates.len() - 1]);
        match selection_ratio(&acc) {
            Ok(r) => {
                prop_assert!(r.iter().all(|v| *v >= 0.0));
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
            Err(Error::DegenerateGates) => prop_assert!(acc.iter().all(|v| *v == 0.0)),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
        // weights plus the residual account for the whole prompt input
        let total = acc.iter().sum::<f64>() + residual_weight(&gates).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_weights_give_uniform_ratios(w in 0.01f64..10.0, n in 1usize..10) {
        let r = selection_ratio(&vec![w; n]).unwrap();
        for v in r {
            prop_assert!((v - 1.0 / n as f64).abs() < 1e-15);
        }
    }
}

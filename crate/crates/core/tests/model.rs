#[path = "support/oracle.rs"]
mod oracle;

use corlab::model::Ablation;
use corlab::{Error, ModelConfig, MoeModel, RoutingOverride, Tensor};
use proptest::prelude::*;

fn config(n_layers: usize, n_experts: usize, k: usize, d: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_experts,
        k_baseline: k,
        d_model: d,
        d_ff: 2 * d,
        vocab_size: 11,
        max_seq_len: 8,
        n_heads: 2,
    }
}

fn small(seed: u64) -> MoeModel {
    MoeModel::init(config(2, 4, 2, 8), seed).unwrap()
}

const TOKENS: [u32; 7] = [3, 1, 4, 1, 5, 9, 2];

#[test]
fn logits_match_scalar_reference() {
    for seed in 0..3 {
        let m = small(seed);
        let out = m.forward(&TOKENS, &[], false).unwrap();
        let want = oracle::logits(&m, &TOKENS, &oracle::no_edit);
        for (t, row) in want.iter().enumerate() {
            for (v, w) in row.iter().enumerate() {
                let got = out.logits.row(t)[v] as f64;
                assert!((got - w).abs() < 1e-4, "seed {seed} t {t} v {v}: {got} vs {w}");
            }
        }
    }
}

#[test]
fn zero_router_gives_uniform_gates() {
    let mut m = small(0);
    m.layers[1].router = Tensor::zeros(vec![8, 4]);
    let g = m.gate(&Tensor::vector(vec![0.3; 8]), 1).unwrap();
    for &p in g.data() {
        assert!((p - 0.25).abs() < 1e-7);
    }
}

#[test]
fn gates_are_softmax_of_router_logits() {
    let m = small(5);
    let h: Vec<f32> = (0..8).map(|i| (i as f32 - 3.5) * 0.4).collect();
    let g = m.gate(&Tensor::vector(h.clone()), 0).unwrap();
    let h64: Vec<f64> = h.iter().map(|&v| v as f64).collect();
    let ms = h64.iter().map(|v| v * v).sum::<f64>() / 8.0;
    let x: Vec<f64> = h64.iter().map(|v| v / (ms + 1e-5).sqrt()).collect();
    let r = &m.layers[0].router;
    let logits: Vec<f64> = (0..4)
        .map(|e| (0..8).map(|i| x[i] * r.data()[i * 4 + e] as f64).sum())
        .collect();
    let want = oracle::softmax(&logits);
    for e in 0..4 {
        assert!((g.data()[e] as f64 - want[e]).abs() < 1e-6);
    }
}

#[test]
fn zero_experts_make_the_layer_an_identity() {
    let mut m = small(1);
    for ex in &mut m.layers[0].experts {
        ex.w_in = Tensor::zeros(ex.w_in.shape().to_vec());
        ex.w_out = Tensor::zeros(ex.w_out.shape().to_vec());
    }
    let h = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f32).sin()).collect()).unwrap();
    let (out, _) = m.moe_layer_forward(&h, 0, None).unwrap();
    assert_eq!(out, h);
}

#[test]
fn all_experts_active_is_the_dense_mixture() {
    let m = small(2);
    let h: Vec<f32> = (0..8).map(|i| (i as f32 * 0.7).cos()).collect();
    let (out, trace) = m
        .moe_layer_forward(&Tensor::vector(h.clone()), 1, Some(&RoutingOverride::with_k(4)))
        .unwrap();
    let g = m.gate(&Tensor::vector(h.clone()), 1).unwrap();
    let h64: Vec<f64> = h.iter().map(|&v| v as f64).collect();
    let ms = h64.iter().map(|v| v * v).sum::<f64>() / 8.0;
    let x: Vec<f64> = h64.iter().map(|v| v / (ms + 1e-5).sqrt()).collect();
    let mut want = h64.clone();
    for e in 0..4 {
        let y = oracle::expert(&m, 1, e, &x);
        for j in 0..8 {
            want[j] += g.data()[e] as f64 * y[j];
        }
    }
    assert_eq!(trace.active[0].len(), 4);
    for j in 0..8 {
        assert!((out.data()[j] as f64 - want[j]).abs() < 1e-5);
    }
}

#[test]
fn zero_k_is_the_residual_identity() {
    let m = small(3);
    let h = Tensor::vector((0..8).map(|i| i as f32 * 0.1).collect());
    let (out, trace) = m.moe_layer_forward(&h, 0, Some(&RoutingOverride::with_k(0))).unwrap();
    assert_eq!(out, h);
    assert!(trace.active[0].is_empty());
}

#[test]
fn null_prior_is_bitwise_standard_routing() {
    let m = small(4);
    let base = m.forward(&TOKENS, &[], true).unwrap();
    let ov = vec![
        RoutingOverride {
            k: Some(2),
            prior: Some(vec![0.0; 4]),
            lambda: 0.0,
            ..RoutingOverride::default()
        };
        2
    ];
    let fused = m.forward(&TOKENS, &ov, true).unwrap();
    assert_eq!(base.logits, fused.logits);
    assert_eq!(base.traces, fused.traces);
    assert_eq!(base.expert_calls, 2 * 2 * TOKENS.len());
}

#[test]
fn forward_is_deterministic() {
    let m = small(6);
    let a = m.forward(&TOKENS, &[], true).unwrap();
    let b = m.forward(&TOKENS, &[], true).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.traces, b.traces);
}

#[test]
fn prefix_logits_do_not_see_the_future() {
    let m = small(7);
    let full = m.forward(&TOKENS, &[], false).unwrap();
    let part = m.forward(&TOKENS[..4], &[], false).unwrap();
    for t in 0..4 {
        assert_eq!(full.logits.row(t), part.logits.row(t));
    }
}

#[test]
fn input_errors() {
    let m = small(0);
    assert!(matches!(m.forward(&[1; 9], &[], false), Err(Error::Input(_))));
    assert!(matches!(m.forward(&[1, 11], &[], false), Err(Error::Index(_))));
    assert!(matches!(
        m.forward(&[1, 2], &[RoutingOverride::default()], false),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        m.forward(&[1, 2], &[RoutingOverride::with_k(5), RoutingOverride::default()], false),
        Err(Error::Config(_))
    ));
}

#[test]
fn ablation_renormalises_the_remaining_gates() {
    let m = small(8);
    let base = m.forward(&TOKENS, &[], true).unwrap();
    let trace = &base.traces.as_ref().unwrap()[1];
    let pos = 4;
    let e = trace.active[pos][0];
    let mut ov = vec![RoutingOverride::default(); 2];
    ov[1].ablations.push(Ablation { position: pos, expert: e });
    let ab = m.forward(&TOKENS, &ov, true).unwrap();
    let want = oracle::logits(&m, &TOKENS, &|l, t, g, active| {
        (l == 1 && t == pos).then(|| {
            let rest: Vec<usize> = active.iter().copied().filter(|&a| a != e).collect();
            let mass: f64 = rest.iter().map(|&a| g[a]).sum();
            rest.iter().map(|&a| (a, g[a] / mass)).collect()
        })
    });
    for t in 0..TOKENS.len() {
        for v in 0..11 {
            assert!((ab.logits.row(t)[v] as f64 - want[t][v]).abs() < 1e-4);
        }
        if t < pos {
            assert_eq!(ab.logits.row(t), base.logits.row(t));
        }
    }
    assert_eq!(ab.expert_calls, base.expert_calls - 1);

    let other = (0..4).find(|x| !trace.active[pos].contains(x)).unwrap();
    ov[1].ablations = vec![Ablation { position: pos, expert: other }];
    assert!(matches!(m.forward(&TOKENS, &ov, false), Err(Error::NotActivated { .. })));

    let m1: MoeModel = MoeModel::init(config(2, 4, 1, 8), 0).unwrap();
    let t1 = m1.forward(&TOKENS, &[], true).unwrap().traces.unwrap();
    let mut ov = vec![RoutingOverride::default(); 2];
    ov[0].ablations.push(Ablation { position: 0, expert: t1[0].active[0][0] });
    assert!(matches!(m1.forward(&TOKENS, &ov, false), Err(Error::AblationDegenerate { .. })));
}

#[test]
fn output_scale_multiplies_the_expert_sum() {
    let m = small(9);
    let h = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f32 * 0.3).sin()).collect()).unwrap();
    let (a, ta) = m.moe_layer_forward(&h, 0, None).unwrap();
    let (b, tb) = m.moe_layer_forward(&h, 0, Some(&RoutingOverride::scaled(1.1))).unwrap();
    for i in 0..16 {
        let oa = a.data()[i] - h.data()[i];
        let ob = b.data()[i] - h.data()[i];
        assert!((ob - 1.1 * oa).abs() < 1e-5);
        assert!((tb.output.data()[i] - 1.1 * ta.output.data()[i]).abs() < 1e-6);
    }
}

#[test]
fn random_routing_keeps_the_budget() {
    let m = small(10);
    let ov = vec![
        RoutingOverride {
            random_seed: Some(3),
            ..RoutingOverride::default()
        };
        2
    ];
    let a = m.forward(&TOKENS, &ov, true).unwrap();
    let b = m.forward(&TOKENS, &ov, true).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.expert_calls, 2 * 2 * TOKENS.len());
    for tr in a.traces.unwrap() {
        for set in tr.active {
            assert_eq!(set.len(), 2);
            assert_ne!(set[0], set[1]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_are_distributions_and_selection_is_top_k(
        seed in 0u64..1000,
        tokens in proptest::collection::vec(0u32..11, 1..8),
    ) {
        let m = small(seed);
        let out = m.forward(&tokens, &[], true).unwrap();
        for tr in out.traces.unwrap() {
            for t in 0..tokens.len() {
                let g = tr.gates.row(t);
                prop_assert!(g.iter().all(|&p| p >= 0.0));
                let s: f64 = g.iter().map(|&p| p as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                let mut idx: Vec<usize> = (0..4).collect();
                idx.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).unwrap().then(a.cmp(&b)));
                prop_assert_eq!(&tr.active[t], &idx[..2].to_vec());
            }
        }
    }

    #[test]
    fn zeroed_experts_leave_the_stream_unchanged(seed in 0u64..1000, layer in 0usize..2) {
        let mut m = small(seed);
        for ex in &mut m.layers[layer].experts {
            ex.w_out = Tensor::zeros(ex.w_out.shape().to_vec());
        }
        let out = m.forward(&TOKENS, &[], true).unwrap();
        let tr = &out.traces.unwrap()[layer];
        prop_assert!(tr.output.data().iter().all(|&v| v == 0.0));
    }
}

mod common;

use common::{banded_layer, gates};
use dsmoe::moe::{DsmoeLayer, GateSource, Routing};
use dsmoe::numeric::gaussian_init;
use dsmoe::{DenseFfn, Matrix, Rng};
use proptest::prelude::*;

fn layer(seed: u64, d: usize, width: usize, n: usize, gate_std: f64) -> DsmoeLayer {
    let mut rng = Rng::new(seed);
    let dense = DenseFfn::init(&mut rng, d, width, 0.5).unwrap();
    let mut l = DsmoeLayer::partition(&dense, n, 0.5).unwrap();
    l.init_gate(&mut rng, gate_std).unwrap();
    l
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn experts_sum_to_dense(
        seed in any::<u64>(),
        d in 1usize..=16,
        n_pow in 1u32..=3,
        k in 1usize..=8,
        rows in 1usize..6,
    ) {
        let n = 1usize << n_pow;
        let mut rng = Rng::new(seed);
        let dense = DenseFfn::init(&mut rng, d, n * k, 0.5).unwrap();
        let h = gaussian_init(&mut rng, rows, d, 1.0).unwrap();
        let l = DsmoeLayer::partition(&dense, n, 0.5).unwrap();
        let mut sum = Matrix::zeros(rows, d);
        for e in &l.experts {
            sum.add_assign(&e.forward(&h).unwrap().0).unwrap();
        }
        prop_assert!(sum.max_abs_diff(&dense.forward(&h).unwrap().0) <= 1e-12);
        prop_assert!(l.reconstruct_dense().unwrap() == dense);
    }

    #[test]
    fn scaling_invariant_is_exact(seed in any::<u64>(), mask in 1u8..16) {
        let l = layer(seed, 6, 16, 4, 0.5);
        let h = gaussian_init(&mut Rng::new(seed ^ 1), 1, 6, 1.0).unwrap();
        let active: Vec<usize> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
        let values = Matrix::from_vec(1, 4, (0..4).map(|i| if active.contains(&i) { 1.0 } else { 0.0 }).collect()).unwrap();
        let routing = Routing { gates: GateSource::Fixed(&values), ..Routing::INFERENCE };
        let (out, _) = l.forward(&h, &routing).unwrap();
        let mut expected = Matrix::zeros(1, 6);
        for &i in &active {
            expected.add_assign(&l.experts[i].forward(&h).unwrap().0).unwrap();
        }
        expected.scale(4.0 / active.len() as f64);
        prop_assert!(out == expected);
    }
}

#[test]
fn ste_only_changes_gradients() {
    let l = layer(5, 8, 32, 8, 0.3);
    let h = gaussian_init(&mut Rng::new(6), 10, 8, 1.0).unwrap();
    let with = Routing {
        ste: true,
        ..Routing::INFERENCE
    };
    let (a, _) = l.forward(&h, &with).unwrap();
    let (b, _) = l.forward(&h, &Routing::INFERENCE).unwrap();
    assert!(a == b);
}

#[test]
fn dead_gate_columns_blocked_without_ste() {
    // First seeded instance where some expert stays below τ for every token.
    let (l, h, dead) = (50..)
        .find_map(|seed| {
            let (l, h) = banded_layer(seed, 6);
            let g = gates(&l, &h);
            let dead: Vec<usize> = (0..l.n())
                .filter(|&i| (0..h.rows()).all(|t| g.get(t, i) <= l.tau))
                .collect();
            (!dead.is_empty()).then_some((l, h, dead))
        })
        .unwrap();
    let d_out = gaussian_init(&mut Rng::new(3), 6, 4, 1.0).unwrap();
    for ste in [false, true] {
        let routing = Routing {
            ste,
            ..Routing::INFERENCE
        };
        let (_, cache) = l.forward(&h, &routing).unwrap();
        let (_, grads) = l.backward(&cache, &d_out, None).unwrap();
        for &i in &dead {
            let col: Vec<f64> = (0..grads.gate.rows())
                .map(|r| grads.gate.get(r, i))
                .collect();
            let zero = col.iter().all(|&x| x == 0.0);
            assert_eq!(zero, !ste, "expert {i}, ste {ste}: {col:?}");
            let e = &grads.experts[i];
            assert!([&e.w_gate, &e.u_up, &e.v_down]
                .iter()
                .all(|m| m.data().iter().all(|&x| x == 0.0)));
        }
    }
}

#[test]
fn zero_active_token_under_ste_still_trains_gates() {
    let l = layer(8, 6, 12, 3, 0.3);
    let h = gaussian_init(&mut Rng::new(9), 2, 6, 1.0).unwrap();
    let values = Matrix::filled(2, 3, 0.2);
    let decision_free = Routing {
        ste: true,
        tau: Some(0.99),
        ..Routing::INFERENCE
    };
    let (out, cache) = l.forward(&h, &decision_free).unwrap();
    assert!(out.data().iter().all(|&x| x == 0.0));
    assert_eq!(cache.decision().zero_active_tokens(), 2);
    assert_eq!(cache.decision().scale, vec![1.0, 1.0]);
    let d_out = gaussian_init(&mut Rng::new(10), 2, 6, 1.0).unwrap();
    let (_, grads) = l.backward(&cache, &d_out, None).unwrap();
    assert!(grads.gate.data().iter().any(|&x| x != 0.0));
    for e in &grads.experts {
        assert!([&e.w_gate, &e.u_up, &e.v_down]
            .iter()
            .all(|m| m.data().iter().all(|&x| x == 0.0)));
    }
    // The fixed source never produces a gate gradient.
    let fixed = Routing {
        ste: true,
        gates: GateSource::Fixed(&values),
        ..Routing::INFERENCE
    };
    let (_, cache) = l.forward(&h, &fixed).unwrap();
    let (_, grads) = l.backward(&cache, &d_out, None).unwrap();
    assert!(grads.gate.data().iter().all(|&x| x == 0.0));
}

#[test]
fn only_active_pairs_are_evaluated() {
    let l = layer(11, 8, 64, 8, 0.4);
    let h = gaussian_init(&mut Rng::new(12), 40, 8, 1.0).unwrap();
    let (_, cache) = l.forward(&h, &Routing::INFERENCE).unwrap();
    let active: usize = (0..40).map(|t| cache.decision().active_count[t]).sum();
    assert_eq!(cache.expert_evaluations(), active);
    assert!(active < 40 * 8 && active > 0);
    let soft = Routing {
        use_g: false,
        ..Routing::INFERENCE
    };
    let (_, cache) = l.forward(&h, &soft).unwrap();
    assert_eq!(cache.expert_evaluations(), 40 * 8);
}

#[test]
fn fresh_gates_sit_near_half() {
    let l = layer(13, 64, 64, 8, 0.02);
    let h = gaussian_init(&mut Rng::new(14), 500, 64, 1.0).unwrap();
    let g = gates(&l, &h);
    let inside = g
        .data()
        .iter()
        .filter(|&&x| (0.35..=0.65).contains(&x))
        .count();
    assert!(inside as f64 >= 0.99 * g.len() as f64);
    let again = layer(13, 64, 64, 8, 0.02);
    assert!(again.gate == l.gate);
}

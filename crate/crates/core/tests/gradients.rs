//! Analytic gradients against central finite differences.

mod common;

use common::*;
use dsmoe::dense::{cross_entropy, AttentionBlock, DenseFfn};
use dsmoe::moe::{convert_model, DsmoeLayer, GateSource, Routing};
use dsmoe::numeric::gaussian_init;
use dsmoe::train::{batch_gradients, sparsity_loss, LossWeights};
use dsmoe::{Matrix, Model, Rng};

const TOL: f64 = 1e-6;

fn probe_loss(out: &Matrix, c: &Matrix) -> f64 {
    out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn fd_matrix(base: &Matrix, analytic: &Matrix, mut f: impl FnMut(&Matrix) -> f64) -> f64 {
    let mut p = base.clone();
    let mut worst: f64 = 0.0;
    for j in 0..base.len() {
        let o = p.data()[j];
        let numeric = five_point(
            |x| {
                p.data_mut()[j] = x;
                f(&p)
            },
            o,
        );
        p.data_mut()[j] = o;
        worst = worst.max(rel_err(analytic.data()[j], numeric));
    }
    worst
}

#[test]
fn dense_ffn_gradients() {
    let mut rng = Rng::new(21);
    let ffn = DenseFfn::init(&mut rng, 4, 8, 0.6).unwrap();
    let h = gaussian_init(&mut rng, 3, 4, 1.0).unwrap();
    let c = gaussian_init(&mut rng, 3, 4, 1.0).unwrap();
    let (_, cache) = ffn.forward(&h).unwrap();
    let (d_h, g) = ffn.backward(&cache, &c).unwrap();
    let loss = |f: &DenseFfn, h: &Matrix| probe_loss(&f.forward(h).unwrap().0, &c);
    let e_h = fd_matrix(&h, &d_h, |x| loss(&ffn, x));
    let e_w = fd_matrix(&ffn.w_gate, &g.w_gate, |w| {
        loss(
            &DenseFfn {
                w_gate: w.clone(),
                ..ffn.clone()
            },
            &h,
        )
    });
    let e_u = fd_matrix(&ffn.u_up, &g.u_up, |u| {
        loss(
            &DenseFfn {
                u_up: u.clone(),
                ..ffn.clone()
            },
            &h,
        )
    });
    let e_v = fd_matrix(&ffn.v_down, &g.v_down, |v| {
        loss(
            &DenseFfn {
                v_down: v.clone(),
                ..ffn.clone()
            },
            &h,
        )
    });
    for (name, e) in [("h", e_h), ("w", e_w), ("u", e_u), ("v", e_v)] {
        assert!(e < TOL, "{name}: {e}");
    }
}

#[test]
fn attention_gradients() {
    let mut rng = Rng::new(22);
    let attn = AttentionBlock::init(&mut rng, 4, 2, 0.7).unwrap();
    let h = gaussian_init(&mut rng, 3, 4, 1.0).unwrap();
    let c = gaussian_init(&mut rng, 3, 4, 1.0).unwrap();
    let (_, cache) = attn.forward(&h).unwrap();
    let (d_h, g) = attn.backward(&cache, &c).unwrap();
    let loss = |a: &AttentionBlock, h: &Matrix| probe_loss(&a.forward(h).unwrap().0, &c);
    assert!(fd_matrix(&h, &d_h, |x| loss(&attn, x)) < TOL);
    let worst = [
        fd_matrix(&attn.wq, &g.wq, |w| {
            loss(
                &AttentionBlock {
                    wq: w.clone(),
                    ..attn.clone()
                },
                &h,
            )
        }),
        fd_matrix(&attn.wk, &g.wk, |w| {
            loss(
                &AttentionBlock {
                    wk: w.clone(),
                    ..attn.clone()
                },
                &h,
            )
        }),
        fd_matrix(&attn.wv, &g.wv, |w| {
            loss(
                &AttentionBlock {
                    wv: w.clone(),
                    ..attn.clone()
                },
                &h,
            )
        }),
        fd_matrix(&attn.wo, &g.wo, |w| {
            loss(
                &AttentionBlock {
                    wo: w.clone(),
                    ..attn.clone()
                },
                &h,
            )
        }),
    ];
    assert!(worst.iter().all(|&e| e < TOL), "{worst:?}");
}

#[test]
fn dense_model_end_to_end() {
    let mut model = Model::init(small_config(), 3).unwrap();
    randomize(&mut model, 30, 0.4);
    let seq: Vec<u32> = vec![3, 1, 4, 1, 5, 9];
    let w = LossWeights {
        lm: 1.0,
        sparsity: 0.0,
    };
    let (_, grads) =
        batch_gradients(&model, std::slice::from_ref(&seq), &Routing::INFERENCE, w).unwrap();
    let loss = |m: &Model| {
        let (logits, _) = m.forward(&seq[..5], &Routing::INFERENCE).unwrap();
        cross_entropy(&logits, &seq[1..]).unwrap().0
    };
    let (e, at) = model_fd_max_rel(&model, &grads, loss, |_| false);
    assert!(e < 1e-5, "{e} at {at}");
}

#[test]
fn forward_matches_brute_force() {
    let (layer, h) = banded_layer(100, 3);
    let g = gates(&layer, &h);
    for ste in [false, true] {
        let routing = Routing {
            ste,
            ..Routing::INFERENCE
        };
        let (out, _) = layer.forward(&h, &routing).unwrap();
        assert!(out.max_abs_diff(&surrogate(&layer, &h, &g, false)) < 1e-12);
    }
}

#[test]
fn dsmoe_layer_gradients_with_and_without_ste() {
    let (layer, h) = banded_layer(200, 4);
    let c = gaussian_init(&mut Rng::new(9), 4, 4, 1.0).unwrap();
    let frozen = gates(&layer, &h);
    for ste in [false, true] {
        let routing = Routing {
            ste,
            ..Routing::INFERENCE
        };
        let (_, cache) = layer.forward(&h, &routing).unwrap();
        let (d_h, g) = layer.backward(&cache, &c, None).unwrap();
        let loss = |l: &DsmoeLayer, x: &Matrix| probe_loss(&surrogate(l, x, &frozen, ste), &c);
        let mut worst = vec![("h".to_string(), fd_matrix(&h, &d_h, |x| loss(&layer, x)))];
        worst.push((
            "gate".into(),
            fd_matrix(&layer.gate, &g.gate, |y| {
                loss(
                    &DsmoeLayer {
                        gate: y.clone(),
                        ..layer.clone()
                    },
                    &h,
                )
            }),
        ));
        for i in 0..layer.n() {
            let with = |f: &dyn Fn(&mut DenseFfn)| {
                let mut l = layer.clone();
                f(&mut l.experts[i]);
                l
            };
            let e = &layer.experts[i];
            let ge = &g.experts[i];
            worst.push((
                format!("w{i}"),
                fd_matrix(&e.w_gate, &ge.w_gate, |m| {
                    loss(&with(&|x| x.w_gate = m.clone()), &h)
                }),
            ));
            worst.push((
                format!("u{i}"),
                fd_matrix(&e.u_up, &ge.u_up, |m| {
                    loss(&with(&|x| x.u_up = m.clone()), &h)
                }),
            ));
            worst.push((
                format!("v{i}"),
                fd_matrix(&e.v_down, &ge.v_down, |m| {
                    loss(&with(&|x| x.v_down = m.clone()), &h)
                }),
            ));
        }
        for (name, e) in &worst {
            assert!(*e < TOL, "ste={ste} {name}: {e}");
        }
    }
}

#[test]
fn soft_mixture_gradients() {
    let (layer, h) = banded_layer(300, 3);
    let c = gaussian_init(&mut Rng::new(10), 3, 4, 1.0).unwrap();
    let routing = Routing {
        use_g: false,
        ..Routing::INFERENCE
    };
    let (_, cache) = layer.forward(&h, &routing).unwrap();
    let (d_h, g) = layer.backward(&cache, &c, None).unwrap();
    let loss = |l: &DsmoeLayer, x: &Matrix| probe_loss(&l.forward(x, &routing).unwrap().0, &c);
    assert!(fd_matrix(&h, &d_h, |x| loss(&layer, x)) < TOL);
    assert!(
        fd_matrix(&layer.gate, &g.gate, |y| loss(
            &DsmoeLayer {
                gate: y.clone(),
                ..layer.clone()
            },
            &h
        )) < TOL
    );
}

/// Sparse model where every gate value over `seq` is clear of the band.
fn banded_model(seq: &[u32]) -> Model {
    for s in 0.. {
        let mut dense = Model::init(small_config(), s).unwrap();
        randomize(&mut dense, 1000 + s, 0.4);
        let mut m = convert_model(&dense, 4, 0.5, s, 1.0).unwrap();
        for layer in m.sparse_layers_mut() {
            layer.gate.scale(2.0);
        }
        let (_, cache) = m.forward(seq, &Routing::INFERENCE).unwrap();
        let ok = cache.gate_decisions().iter().all(|d| {
            d.values.data().iter().all(|&g| (g - 0.5).abs() > 0.05) && d.total_active() > 0
        });
        if ok {
            return m;
        }
    }
    unreachable!()
}

#[test]
fn sparse_model_total_loss_gradients() {
    let seq: Vec<u32> = vec![2, 7, 1, 8, 2, 8];
    let model = banded_model(&seq[..5]);
    for (routing, lambda) in [
        (Routing::INFERENCE, 0.0),
        (Routing::INFERENCE, 1.0),
        (
            Routing {
                use_g: false,
                ..Routing::INFERENCE
            },
            0.7,
        ),
    ] {
        let w = LossWeights {
            lm: 1.0,
            sparsity: lambda,
        };
        let (_, grads) = batch_gradients(&model, std::slice::from_ref(&seq), &routing, w).unwrap();
        let loss = |m: &Model| {
            let (logits, cache) = m.forward(&seq[..5], &routing).unwrap();
            let lm = cross_entropy(&logits, &seq[1..]).unwrap().0;
            let values: Vec<&Matrix> = cache.gate_decisions().iter().map(|d| &d.values).collect();
            lm + lambda * sparsity_loss(&values, 0.5, routing.use_g).unwrap()
        };
        let (e, at) = model_fd_max_rel(&model, &grads, loss, |_| false);
        assert!(e < TOL, "use_g={} λ={lambda}: {e} at {at}", routing.use_g);
    }
}

#[test]
fn fixed_gates_block_gate_gradient() {
    let (layer, h) = banded_layer(400, 3);
    let fixed = Matrix::filled(3, 4, 0.9);
    let routing = Routing {
        ste: true,
        gates: GateSource::Fixed(&fixed),
        ..Routing::INFERENCE
    };
    let (_, cache) = layer.forward(&h, &routing).unwrap();
    let (_, g) = layer
        .backward(&cache, &Matrix::filled(3, 4, 1.0), Some(&fixed))
        .unwrap();
    assert!(g.gate.data().iter().all(|&x| x == 0.0));
}

#![allow(dead_code)]

use dsmoe::dense::FeedForward;
use dsmoe::moe::g_piecewise;
use dsmoe::numeric::{gaussian_init, sigmoid, silu};
use dsmoe::{DenseFfn, DsmoeLayer, Matrix, Model, ModelConfig, Rng};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Fourth-order central difference of `f` at `x`.
pub fn five_point(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = FD_STEP;
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        d_ff: 16,
        layers: 2,
        heads: 2,
        max_seq_len: 8,
    }
}

/// Replaces every tensor with N(0, std²) noise (norm gains around 1) so
/// gradients are far from zero.
pub fn randomize(model: &mut Model, seed: u64, std: f64) {
    let mut rng = Rng::new(seed);
    for t in model.tensors_mut() {
        let noise = gaussian_init(&mut rng, t.rows(), t.cols(), std).unwrap();
        let is_gain = t.rows() == 1;
        *t = if is_gain {
            noise.map(|x| 1.0 + x)
        } else {
            noise
        };
    }
}

/// Worst relative error of central differences of `loss` against the
/// gradients in `grads`, over every entry of every tensor of `model`.
/// `skip(tensor_name)` excludes tensors.
pub fn model_fd_max_rel(
    model: &Model,
    grads: &Model,
    loss: impl Fn(&Model) -> f64,
    skip: impl Fn(&str) -> bool,
) -> (f64, String) {
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    for (k, name) in names.iter().enumerate() {
        if skip(name) {
            continue;
        }
        for j in 0..analytic[k].len() {
            let orig = probe.tensors_mut()[k].data()[j];
            let numeric = five_point(
                |x| {
                    probe.tensors_mut()[k].data_mut()[j] = x;
                    loss(&probe)
                },
                orig,
            );
            probe.tensors_mut()[k].data_mut()[j] = orig;
            let e = rel_err(analytic[k].data()[j], numeric);
            if e > worst.0 {
                worst = (
                    e,
                    format!(
                        "{name}[{j}] analytic {} numeric {numeric}",
                        analytic[k].data()[j]
                    ),
                );
            }
        }
    }
    worst
}

pub fn ffn_of(model: &Model, l: usize) -> &FeedForward {
    &model.blocks[l].ffn
}

/// Deterministic repetitive byte text of roughly `len` bytes.
pub fn repetitive_text(len: usize) -> Vec<u8> {
    let lines = [
        "the quick brown fox jumps over the lazy dog. ",
        "a stitch in time saves nine. ",
        "all that glitters is not gold. ",
        "the early bird catches the worm. ",
    ];
    let mut out = Vec::with_capacity(len + 64);
    let mut rng = Rng::new(1234);
    while out.len() < len {
        out.extend_from_slice(lines[rng.below(lines.len())].as_bytes());
    }
    out.truncate(len);
    out
}

/// Gate values for `h`, straight from the gate matrix.
pub fn gates(layer: &DsmoeLayer, h: &Matrix) -> Matrix {
    h.matmul(&layer.gate).unwrap().map(sigmoid)
}

/// Scalar brute-force evaluation of the gated mixture. `frozen` holds the
/// gate values at which stop-gradient terms are pinned; with `ste` the gate
/// factor is `G(g₀) + g − g₀`, otherwise `G(g)`. The rescale factor is
/// computed from `frozen`.
pub fn surrogate(layer: &DsmoeLayer, h: &Matrix, frozen: &Matrix, ste: bool) -> Matrix {
    let n = layer.n();
    let d = layer.model_dim();
    let g = gates(layer, h);
    let tau = layer.tau;
    let mut out = Matrix::zeros(h.rows(), d);
    for t in 0..h.rows() {
        let k = (0..n).filter(|&i| frozen.get(t, i) > tau).count();
        let scale = if k == 0 { 1.0 } else { n as f64 / k as f64 };
        for (i, e) in layer.experts.iter().enumerate() {
            let g0 = frozen.get(t, i);
            let factor = if ste {
                g_piecewise(g0, tau) + g.get(t, i) - g0
            } else {
                g_piecewise(g.get(t, i), tau)
            };
            let width = e.w_gate.cols();
            for j in 0..width {
                let (mut a, mut u) = (0.0, 0.0);
                for c in 0..d {
                    a += h.get(t, c) * e.w_gate.get(c, j);
                    u += h.get(t, c) * e.u_up.get(c, j);
                }
                let m = silu(a) * u;
                for c in 0..d {
                    out.set(
                        t,
                        c,
                        out.get(t, c) + scale * factor * m * e.v_down.get(j, c),
                    );
                }
            }
        }
    }
    out
}

/// Seeded layer whose gate values all sit at least 0.05 away from τ.
pub fn banded_layer(seed: u64, t_len: usize) -> (DsmoeLayer, Matrix) {
    for s in seed.. {
        let mut rng = Rng::new(s);
        let dense = DenseFfn::init(&mut rng, 4, 8, 0.6).unwrap();
        let mut layer = DsmoeLayer::partition(&dense, 4, 0.5).unwrap();
        layer.init_gate(&mut rng, 1.5).unwrap();
        let h = gaussian_init(&mut rng, t_len, 4, 1.0).unwrap();
        let g = gates(&layer, &h);
        let clear = g.data().iter().all(|&x| (x - 0.5).abs() > 0.05);
        let mixed = g.data().iter().any(|&x| x > 0.5) && g.data().iter().any(|&x| x < 0.5);
        if clear && mixed {
            return (layer, h);
        }
    }
    unreachable!()
}

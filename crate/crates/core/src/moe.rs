//! Dynamic sparse mixture-of-experts built by slicing a dense SwiGLU block.
//!
//! A dense FFN with intermediate width `D` is split into `n` contiguous
//! blocks of width `D/n`. Each block is an expert; summing all expert outputs
//! reproduces the dense output. A sigmoid gate `σ(h·Y)` scores every expert
//! per token; an expert contributes only when its score is strictly above the
//! threshold `τ`, and the token output is rescaled by `n / active_count`.
//!
//! Training through the hard threshold uses a straight-through estimator:
//! the forward value is `G(g)` but the backward treats the gate as identity,
//! so gate columns of inactive experts still receive gradient. Expert weights
//! of inactive experts always get exactly zero gradient. The rescale factor
//! is a constant for differentiation.

use crate::dense::{DenseFfn, FfnCache};
use crate::error::{Error, Result};
use crate::numeric::{dot, gaussian_init, sigmoid, Matrix, Rng};

/// One expert is a narrow SwiGLU block (`d × D/n`, `D/n × d`).
pub type ExpertFfn = DenseFfn;

pub const DEFAULT_GATE_STD: f64 = 0.02;

/// Threshold gate: `x` when `x > τ`, else 0.
pub fn g_piecewise(x: f64, tau: f64) -> f64 {
    if x > tau {
        x
    } else {
        0.0
    }
}

/// Where gate values come from during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateSource<'a> {
    /// `σ(h·Y)` from the layer's gate matrix.
    Learned,
    /// Every gate value set to the constant; no gradient reaches `Y`.
    Constant(f64),
    /// Explicit `T × n` gate values; no gradient reaches `Y`.
    Fixed(&'a Matrix),
}

/// Per-call routing semantics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Routing<'a> {
    /// Straight-through gradients for the gate (backward only).
    pub ste: bool,
    /// Apply the threshold and rescale. `false` gives the soft `Σ oᵢ·gᵢ` mix.
    pub use_g: bool,
    /// Overrides the layer threshold for this call.
    pub tau: Option<f64>,
    pub gates: GateSource<'a>,
}

impl Routing<'_> {
    /// Thresholded inference, no gradient semantics.
    pub const INFERENCE: Routing<'static> = Routing {
        ste: false,
        use_g: true,
        tau: None,
        gates: GateSource::Learned,
    };

    pub fn with_tau(self, tau: Option<f64>) -> Self {
        Routing { tau, ..self }
    }
}

impl Default for Routing<'_> {
    fn default() -> Self {
        Routing::INFERENCE
    }
}

/// Gate values and the threshold decision for one batch of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    /// `T × n`, each in (0, 1) when learned.
    pub values: Matrix,
    /// Row-major `T × n`; `active[t*n + i] ⇔ values[t][i] > τ`.
    pub active: Vec<bool>,
    pub active_count: Vec<usize>,
    /// `n / active_count`, or 1 when no expert is active.
    pub scale: Vec<f64>,
    pub tau: f64,
}

impl GateDecision {
    pub fn new(values: Matrix, tau: f64) -> Self {
        let (t_len, n) = values.shape();
        let active: Vec<bool> = values.data().iter().map(|&g| g > tau).collect();
        let active_count: Vec<usize> = active
            .chunks(n.max(1))
            .map(|row| row.iter().filter(|&&a| a).count())
            .take(t_len)
            .collect();
        let scale = active_count
            .iter()
            .map(|&k| if k == 0 { 1.0 } else { n as f64 / k as f64 })
            .collect();
        GateDecision {
            values,
            active,
            active_count,
            scale,
            tau,
        }
    }

    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn experts(&self) -> usize {
        self.values.cols()
    }

    pub fn is_active(&self, t: usize, i: usize) -> bool {
        self.active[t * self.experts() + i]
    }

    pub fn zero_active_tokens(&self) -> usize {
        self.active_count.iter().filter(|&&k| k == 0).count()
    }

    pub fn total_active(&self) -> usize {
        self.active_count.iter().sum()
    }
}

#[derive(Debug, Clone)]
struct ExpertCache {
    rows: Vec<usize>,
    ffn: FfnCache,
    out: Matrix,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct DsmoeCache {
    input: Matrix,
    decision: GateDecision,
    ste: bool,
    use_g: bool,
    learned: bool,
    experts: Vec<ExpertCache>,
    expert_evaluations: usize,
}

impl DsmoeCache {
    pub fn decision(&self) -> &GateDecision {
        &self.decision
    }

    /// Number of (token, expert) pairs for which the expert block was run.
    pub fn expert_evaluations(&self) -> usize {
        self.expert_evaluations
    }

    pub fn ste(&self) -> bool {
        self.ste
    }

    pub fn use_g(&self) -> bool {
        self.use_g
    }
}

/// `n` expert blocks, a `d × n` gate matrix `Y` and threshold `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmoeLayer {
    pub experts: Vec<ExpertFfn>,
    pub gate: Matrix,
    pub tau: f64,
}

impl DsmoeLayer {
    /// Contiguous split of `dense` into `n` experts. Expert `i` owns columns
    /// `[i·D/n, (i+1)·D/n)` of `W_gate`/`U_up` and the same rows of `V_down`.
    /// The gate starts at zero; call [`DsmoeLayer::init_gate`].
    pub fn partition(dense: &DenseFfn, n: usize, tau: f64) -> Result<Self> {
        let hidden = dense.hidden_dim();
        if n < 2 {
            return Err(Error::Param(format!(
                "expert count must be at least 2, got {n}"
            )));
        }
        if !hidden.is_multiple_of(n) {
            return Err(Error::Param(format!(
                "expert count {n} does not divide FFN width {hidden}"
            )));
        }
        check_tau(tau)?;
        let w = hidden / n;
        let experts = (0..n)
            .map(|i| {
                let (lo, hi) = (i * w, (i + 1) * w);
                DenseFfn::new(
                    dense.w_gate.col_block(lo, hi),
                    dense.u_up.col_block(lo, hi),
                    dense.v_down.row_block(lo, hi),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DsmoeLayer {
            experts,
            gate: Matrix::zeros(dense.model_dim(), n),
            tau,
        })
    }

    pub fn init_gate(&mut self, rng: &mut Rng, std: f64) -> Result<()> {
        self.gate = gaussian_init(rng, self.model_dim(), self.n(), std)?;
        Ok(())
    }

    /// Inverse of [`DsmoeLayer::partition`]: concatenate experts in order.
    pub fn reconstruct_dense(&self) -> Result<DenseFfn> {
        let w: Vec<&Matrix> = self.experts.iter().map(|e| &e.w_gate).collect();
        let u: Vec<&Matrix> = self.experts.iter().map(|e| &e.u_up).collect();
        let v: Vec<&Matrix> = self.experts.iter().map(|e| &e.v_down).collect();
        DenseFfn::new(Matrix::hcat(&w)?, Matrix::hcat(&u)?, Matrix::vcat(&v)?)
    }

    pub fn n(&self) -> usize {
        self.experts.len()
    }

    pub fn model_dim(&self) -> usize {
        self.gate.rows()
    }

    pub fn expert_param_count(&self) -> usize {
        self.experts.iter().map(DenseFfn::param_count).sum()
    }

    pub fn zeros_like(&self) -> Self {
        DsmoeLayer {
            experts: self.experts.iter().map(DenseFfn::zeros_like).collect(),
            gate: Matrix::zeros(self.gate.rows(), self.gate.cols()),
            tau: self.tau,
        }
    }

    /// Gate values and activity for `h` under `routing`.
    pub fn gate_decision(&self, h: &Matrix, routing: &Routing) -> Result<GateDecision> {
        if h.cols() != self.model_dim() {
            return Err(Error::shape("dsmoe_gate", h.shape(), self.gate.shape()));
        }
        let tau = routing.tau.unwrap_or(self.tau);
        check_tau(tau)?;
        let values = match routing.gates {
            GateSource::Learned => h.matmul(&self.gate)?.map(sigmoid),
            GateSource::Constant(v) => Matrix::filled(h.rows(), self.n(), v),
            GateSource::Fixed(m) => {
                if m.shape() != (h.rows(), self.n()) {
                    return Err(Error::shape("dsmoe_gate", (h.rows(), self.n()), m.shape()));
                }
                m.clone()
            }
        };
        Ok(GateDecision::new(values, tau))
    }

    /// Thresholded (or soft, when `use_g` is off) expert mixture for `h`.
    ///
    /// With `use_g`, inactive (token, expert) pairs are never evaluated.
    pub fn forward(&self, h: &Matrix, routing: &Routing) -> Result<(Matrix, DsmoeCache)> {
        let decision = self.gate_decision(h, routing)?;
        let (t_len, n) = (h.rows(), self.n());
        let d = self.model_dim();
        let mut mix = Matrix::zeros(t_len, d);
        let mut caches = Vec::with_capacity(n);
        let mut evaluations = 0;
        for (i, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = if routing.use_g {
                (0..t_len).filter(|&t| decision.is_active(t, i)).collect()
            } else {
                (0..t_len).collect()
            };
            let (out, ffn) = expert.forward(&h.gather_rows(&rows))?;
            evaluations += rows.len();
            for (r, &t) in rows.iter().enumerate() {
                let g = decision.values.get(t, i);
                let coef = if routing.use_g {
                    g_piecewise(g, decision.tau)
                } else {
                    g
                };
                for (m, o) in mix.row_mut(t).iter_mut().zip(out.row(r)) {
                    *m += coef * o;
                }
            }
            caches.push(ExpertCache { rows, ffn, out });
        }
        if routing.use_g {
            for t in 0..t_len {
                let s = decision.scale[t];
                mix.row_mut(t).iter_mut().for_each(|x| *x *= s);
            }
        }
        mix.ensure_finite("dsmoe_forward")?;
        Ok((
            mix,
            DsmoeCache {
                input: h.clone(),
                decision,
                ste: routing.ste,
                use_g: routing.use_g,
                learned: routing.gates == GateSource::Learned,
                experts: caches,
                expert_evaluations: evaluations,
            },
        ))
    }

    /// Backward pass. `gate_grad` is an extra `T × n` gradient with respect
    /// to the gate values (the sparsity penalty), added before the sigmoid.
    /// Returns `(∂L/∂h, parameter gradients)`.
    pub fn backward(
        &self,
        cache: &DsmoeCache,
        d_out: &Matrix,
        gate_grad: Option<&Matrix>,
    ) -> Result<(Matrix, DsmoeLayer)> {
        let (t_len, n) = (cache.input.rows(), self.n());
        let d = self.model_dim();
        if d_out.shape() != (t_len, d)
            || cache.experts.len() != n
            || cache.input.cols() != d
            || cache.decision.experts() != n
        {
            return Err(Error::Contract(format!(
                "dsmoe gradient {:?} does not match cache for a {n}-expert layer over {t_len} tokens",
                d_out.shape()
            )));
        }
        if let Some(gg) = gate_grad {
            if gg.shape() != (t_len, n) {
                return Err(Error::shape("dsmoe_backward", (t_len, n), gg.shape()));
            }
        }
        let dec = &cache.decision;
        let mut grads = self.zeros_like();
        let mut d_h = Matrix::zeros(t_len, d);
        let mut d_gate_value = Matrix::zeros(t_len, n);
        let token_scale = |t: usize| if cache.use_g { dec.scale[t] } else { 1.0 };

        for (i, (expert, ec)) in self.experts.iter().zip(&cache.experts).enumerate() {
            let mut d_o = d_out.gather_rows(&ec.rows);
            for (r, &t) in ec.rows.iter().enumerate() {
                let g = dec.values.get(t, i);
                let coef = if cache.use_g {
                    dec.scale[t] * g_piecewise(g, dec.tau)
                } else {
                    g
                };
                d_o.row_mut(r).iter_mut().for_each(|x| *x *= coef);
                let dg = dot(d_out.row(t), ec.out.row(r)) * token_scale(t);
                d_gate_value.set(t, i, dg);
            }
            let (d_in, g) = expert.backward(&ec.ffn, &d_o)?;
            for (r, &t) in ec.rows.iter().enumerate() {
                for (a, b) in d_h.row_mut(t).iter_mut().zip(d_in.row(r)) {
                    *a += b;
                }
            }
            grads.experts[i] = g;

            // Straight-through: inactive experts still route gradient to
            // their gate column, which needs their (skipped) outputs.
            if cache.learned && cache.use_g && cache.ste {
                let idle: Vec<usize> = (0..t_len).filter(|&t| !dec.is_active(t, i)).collect();
                if !idle.is_empty() {
                    let (out, _) = expert.forward(&cache.input.gather_rows(&idle))?;
                    for (r, &t) in idle.iter().enumerate() {
                        d_gate_value.set(t, i, dot(d_out.row(t), out.row(r)) * dec.scale[t]);
                    }
                }
            }
        }

        if cache.learned {
            if let Some(gg) = gate_grad {
                d_gate_value.add_assign(gg)?;
            }
            let mut d_logit = d_gate_value;
            for (dz, &g) in d_logit.data_mut().iter_mut().zip(dec.values.data()) {
                *dz *= g * (1.0 - g);
            }
            grads.gate = cache.input.t_matmul(&d_logit)?;
            d_h.add_assign(&d_logit.matmul_t(&self.gate)?)?;
        }
        Ok((d_h, grads))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Param(format!(
            "threshold must lie in (0, 1), got {tau}"
        )));
    }
    Ok(())
}

/// Replace every dense FFN of `model` with a partitioned DSMoE layer and a
/// freshly initialized gate (`N(0, gate_std²)`, seeded).
pub fn convert_model(
    model: &crate::Model,
    n: usize,
    tau: f64,
    seed: u64,
    gate_std: f64,
) -> Result<crate::Model> {
    use crate::dense::FeedForward;
    if model.is_sparse() {
        return Err(Error::Mode("model is already sparse".into()));
    }
    let mut rng = Rng::new(seed);
    let mut out = model.clone();
    for b in &mut out.blocks {
        if let FeedForward::Dense(f) = &b.ffn {
            let mut layer = DsmoeLayer::partition(f, n, tau)?;
            layer.init_gate(&mut rng, gate_std)?;
            b.ffn = FeedForward::Sparse(layer);
        }
    }
    Ok(out)
}

/// Fold every DSMoE layer back into its dense FFN (gates are dropped).
pub fn densify_model(model: &crate::Model) -> Result<crate::Model> {
    use crate::dense::FeedForward;
    let mut out = model.clone();
    for b in &mut out.blocks {
        if let FeedForward::Sparse(m) = &b.ffn {
            b.ffn = FeedForward::Dense(m.reconstruct_dense()?);
        }
    }
    Ok(out)
}

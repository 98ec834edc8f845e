use crate::error::{Error, Result};
use crate::moe::g_piecewise;
use crate::numeric::Matrix;

/// Sum over tokens of `(1/(L·n)) Σ_l Σ_i G(g)` (or raw `g` when `use_g` is
/// off), plus its (sub)gradient with respect to each layer's gate values.
/// The gradient of `G` is 1 strictly above `τ` and 0 otherwise.
pub fn sparsity_terms(gates: &[&Matrix], tau: f64, use_g: bool) -> Result<(f64, Vec<Matrix>)> {
    let first = gates
        .first()
        .ok_or_else(|| Error::Input("sparsity loss needs at least one layer".into()))?;
    let (t_len, n) = first.shape();
    if let Some(g) = gates.iter().find(|g| g.shape() != (t_len, n)) {
        return Err(Error::shape("sparsity_loss", (t_len, n), g.shape()));
    }
    let norm = 1.0 / (gates.len() * n) as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(gates.len());
    for g in gates {
        let mut d = Matrix::zeros(t_len, n);
        for (dv, &x) in d.data_mut().iter_mut().zip(g.data()) {
            if use_g {
                sum += g_piecewise(x, tau);
                *dv = if x > tau { norm } else { 0.0 };
            } else {
                sum += x;
                *dv = norm;
            }
        }
        grads.push(d);
    }
    Ok((sum * norm, grads))
}

/// Per-token mean of the L1 gate penalty across layers and experts.
pub fn sparsity_loss(gates: &[&Matrix], tau: f64, use_g: bool) -> Result<f64> {
    let (sum, _) = sparsity_terms(gates, tau, use_g)?;
    let t_len = gates[0].rows();
    Ok(if t_len == 0 { 0.0 } else { sum / t_len as f64 })
}

pub fn total_loss(lm: f64, sparse: f64, lambda: f64) -> f64 {
    lm + lambda * sparse
}

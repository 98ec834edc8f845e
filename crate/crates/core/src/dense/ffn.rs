use crate::error::{Error, Result};
use crate::numeric::{gaussian_init, silu, silu_prime, Matrix, Rng};

/// SwiGLU feed-forward block: `(silu(h·W_gate) ⊙ (h·U_up)) · V_down`.
///
/// `w_gate` and `u_up` are `d × D`, `v_down` is `D × d`. Gradients are
/// returned in the same struct, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFfn {
    pub w_gate: Matrix,
    pub u_up: Matrix,
    pub v_down: Matrix,
}

/// Intermediates saved by [`DenseFfn::forward`].
#[derive(Debug, Clone)]
pub struct FfnCache {
    pub input: Matrix,
    /// `h·W_gate`, before the activation.
    pub pre: Matrix,
    /// `h·U_up`.
    pub up: Matrix,
    /// `silu(pre)`.
    pub act: Matrix,
}

impl DenseFfn {
    pub fn new(w_gate: Matrix, u_up: Matrix, v_down: Matrix) -> Result<Self> {
        w_gate.same_shape(&u_up, "DenseFfn::new")?;
        if v_down.shape() != (w_gate.cols(), w_gate.rows()) {
            return Err(Error::shape(
                "DenseFfn::new",
                w_gate.shape(),
                v_down.shape(),
            ));
        }
        Ok(DenseFfn {
            w_gate,
            u_up,
            v_down,
        })
    }

    pub fn init(rng: &mut Rng, d: usize, hidden: usize, std: f64) -> Result<Self> {
        DenseFfn::new(
            gaussian_init(rng, d, hidden, std)?,
            gaussian_init(rng, d, hidden, std)?,
            gaussian_init(rng, hidden, d, std)?,
        )
    }

    pub fn zeros_like(&self) -> Self {
        DenseFfn {
            w_gate: Matrix::zeros(self.w_gate.rows(), self.w_gate.cols()),
            u_up: Matrix::zeros(self.u_up.rows(), self.u_up.cols()),
            v_down: Matrix::zeros(self.v_down.rows(), self.v_down.cols()),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_gate.len() + self.u_up.len() + self.v_down.len()
    }

    pub fn forward(&self, h: &Matrix) -> Result<(Matrix, FfnCache)> {
        if h.cols() != self.model_dim() {
            return Err(Error::shape("ffn_forward", h.shape(), self.w_gate.shape()));
        }
        let pre = h.matmul(&self.w_gate)?;
        let up = h.matmul(&self.u_up)?;
        let act = pre.map(silu);
        let out = act.hadamard(&up)?.matmul(&self.v_down)?;
        Ok((
            out,
            FfnCache {
                input: h.clone(),
                pre,
                up,
                act,
            },
        ))
    }

    /// Returns `(∂L/∂h, parameter gradients)` for upstream gradient `d_out`.
    pub fn backward(&self, cache: &FfnCache, d_out: &Matrix) -> Result<(Matrix, DenseFfn)> {
        if cache.pre.cols() != self.hidden_dim() || cache.input.cols() != self.model_dim() {
            return Err(Error::Contract(
                "ffn cache was produced by a differently shaped block".into(),
            ));
        }
        if d_out.shape() != (cache.input.rows(), self.model_dim()) {
            return Err(Error::Contract(format!(
                "ffn upstream gradient {:?} does not match cached output {:?}",
                d_out.shape(),
                (cache.input.rows(), self.model_dim())
            )));
        }
        let mixed = cache.act.hadamard(&cache.up)?;
        let v_down = mixed.t_matmul(d_out)?;
        let d_mixed = d_out.matmul_t(&self.v_down)?;
        let d_up = d_mixed.hadamard(&cache.act)?;
        let mut d_pre = d_mixed.hadamard(&cache.up)?;
        for (g, &p) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= silu_prime(p);
        }
        let w_gate = cache.input.t_matmul(&d_pre)?;
        let u_up = cache.input.t_matmul(&d_up)?;
        let mut d_h = d_pre.matmul_t(&self.w_gate)?;
        d_h.add_assign(&d_up.matmul_t(&self.u_up)?)?;
        Ok((
            d_h,
            DenseFfn {
                w_gate,
                u_up,
                v_down,
            },
        ))
    }
}

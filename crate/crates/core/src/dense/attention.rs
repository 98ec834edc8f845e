use crate::error::{Error, Result};
use crate::numeric::{dot, gaussian_init, softmax_row, Matrix, Rng};

/// Multi-head causal self-attention. All projections are `d × d` and act on
/// row vectors (`q = h·Wq`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per head, `T × T` row-stochastic and lower-triangular.
    probs: Vec<Matrix>,
    ctx: Matrix,
}

impl AttentionCache {
    pub fn probs(&self) -> &[Matrix] {
        &self.probs
    }
}

impl AttentionBlock {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix, heads: usize) -> Result<Self> {
        let d = wq.rows();
        for m in [&wq, &wk, &wv, &wo] {
            if m.shape() != (d, d) {
                return Err(Error::shape("AttentionBlock::new", (d, d), m.shape()));
            }
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Param(format!(
                "model width {d} is not divisible by head count {heads}"
            )));
        }
        Ok(AttentionBlock {
            wq,
            wk,
            wv,
            wo,
            heads,
        })
    }

    pub fn init(rng: &mut Rng, d: usize, heads: usize, std: f64) -> Result<Self> {
        AttentionBlock::new(
            gaussian_init(rng, d, d, std)?,
            gaussian_init(rng, d, d, std)?,
            gaussian_init(rng, d, d, std)?,
            gaussian_init(rng, d, d, std)?,
            heads,
        )
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.wq.rows();
        AttentionBlock {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            heads: self.heads,
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.wq.len()
    }

    fn head_dim(&self) -> usize {
        self.wq.rows() / self.heads
    }

    pub fn forward(&self, h: &Matrix) -> Result<(Matrix, AttentionCache)> {
        let d = self.wq.rows();
        if h.cols() != d {
            return Err(Error::shape("attn_forward", h.shape(), self.wq.shape()));
        }
        let t_len = h.rows();
        let hd = self.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let q = h.matmul(&self.wq)?;
        let k = h.matmul(&self.wk)?;
        let v = h.matmul(&self.wv)?;
        let mut ctx = Matrix::zeros(t_len, d);
        let mut probs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let off = head * hd;
            let mut p = Matrix::zeros(t_len, t_len);
            for t in 0..t_len {
                let qt = &q.row(t)[off..off + hd];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| dot(qt, &k.row(s)[off..off + hd]) * inv_sqrt)
                    .collect();
                let w = softmax_row(&scores)?;
                p.row_mut(t)[..=t].copy_from_slice(&w);
                let c = &mut ctx.row_mut(t)[off..off + hd];
                for (s, &ws) in w.iter().enumerate() {
                    for (ci, vi) in c.iter_mut().zip(&v.row(s)[off..off + hd]) {
                        *ci += ws * vi;
                    }
                }
            }
            probs.push(p);
        }
        let out = ctx.matmul(&self.wo)?;
        Ok((
            out,
            AttentionCache {
                input: h.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        d_out: &Matrix,
    ) -> Result<(Matrix, AttentionBlock)> {
        let d = self.wq.rows();
        let t_len = cache.input.rows();
        if d_out.shape() != (t_len, d) || cache.probs.len() != self.heads {
            return Err(Error::Contract(format!(
                "attention gradient {:?} does not match cache ({t_len}, {d})",
                d_out.shape()
            )));
        }
        let hd = self.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let wo = cache.ctx.t_matmul(d_out)?;
        let d_ctx = d_out.matmul_t(&self.wo)?;
        let mut d_q = Matrix::zeros(t_len, d);
        let mut d_k = Matrix::zeros(t_len, d);
        let mut d_v = Matrix::zeros(t_len, d);
        for (head, p) in cache.probs.iter().enumerate() {
            let off = head * hd;
            for t in 0..t_len {
                let dc = &d_ctx.row(t)[off..off + hd];
                let d_p: Vec<f64> = (0..=t)
                    .map(|s| dot(dc, &cache.v.row(s)[off..off + hd]))
                    .collect();
                let pt = &p.row(t)[..=t];
                let inner: f64 = pt.iter().zip(&d_p).map(|(a, b)| a * b).sum();
                for s in 0..=t {
                    let ps = pt[s];
                    for (dv, &g) in d_v.row_mut(s)[off..off + hd].iter_mut().zip(dc) {
                        *dv += ps * g;
                    }
                    let ds = ps * (d_p[s] - inner) * inv_sqrt;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..hd {
                        let kj = cache.k.get(s, off + j);
                        let qj = cache.q.get(t, off + j);
                        d_q.data_mut()[t * d + off + j] += ds * kj;
                        d_k.data_mut()[s * d + off + j] += ds * qj;
                    }
                }
            }
        }
        let wq = cache.input.t_matmul(&d_q)?;
        let wk = cache.input.t_matmul(&d_k)?;
        let wv = cache.input.t_matmul(&d_v)?;
        let mut d_h = d_q.matmul_t(&self.wq)?;
        d_h.add_assign(&d_k.matmul_t(&self.wk)?)?;
        d_h.add_assign(&d_v.matmul_t(&self.wv)?)?;
        Ok((
            d_h,
            AttentionBlock {
                wq,
                wk,
                wv,
                wo,
                heads: self.heads,
            },
        ))
    }
}

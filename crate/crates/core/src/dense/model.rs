use serde::{Deserialize, Serialize};

use crate::dense::{AttentionBlock, AttentionCache, DenseFfn, FfnCache, RmsNorm, RmsNormCache};
use crate::error::{Error, Result};
use crate::moe::{DsmoeCache, DsmoeLayer, GateDecision, Routing};
use crate::numeric::{gaussian_init, Matrix, Rng};

/// Weight init std for all projections and embeddings.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            d_ff: 256,
            layers: 4,
            heads: 4,
            max_seq_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("layers", self.layers),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Param(format!("{name} must be at least 1")));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Param("max_seq_len must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Param(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Dense(DenseFfn),
    Sparse(DsmoeLayer),
}

impl FeedForward {
    fn zeros_like(&self) -> Self {
        match self {
            FeedForward::Dense(f) => FeedForward::Dense(f.zeros_like()),
            FeedForward::Sparse(m) => FeedForward::Sparse(m.zeros_like()),
        }
    }
}

/// Pre-norm residual layer: `x += attn(norm(x)); x += ffn(norm(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: RmsNorm,
    pub attn: AttentionBlock,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub enum FfnCacheKind {
    Dense(FfnCache),
    Sparse(DsmoeCache),
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    attn_norm: RmsNormCache,
    attn: AttentionCache,
    ffn_norm: RmsNormCache,
    pub ffn: FfnCacheKind,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    tokens: Vec<u32>,
    final_hidden: Matrix,
    pub blocks: Vec<BlockCache>,
}

impl ModelCache {
    /// Gate decisions of every sparse layer, in layer order.
    pub fn gate_decisions(&self) -> Vec<&GateDecision> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ffn {
                FfnCacheKind::Sparse(c) => Some(c.decision()),
                FfnCacheKind::Dense(_) => None,
            })
            .collect()
    }

    pub fn expert_evaluations(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match &b.ffn {
                FfnCacheKind::Sparse(c) => c.expert_evaluations(),
                FfnCacheKind::Dense(_) => 0,
            })
            .sum()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

/// Decoder-only LM. Logits are `x · E` with `E` of shape `d × vocab`.
///
/// The same type carries gradients: [`Model::backward`] returns a `Model`
/// whose tensors hold `∂L/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub output: Matrix,
}

impl Model {
    /// Fresh dense model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let ModelConfig {
            vocab_size: v,
            d_model: d,
            d_ff,
            layers,
            heads,
            max_seq_len,
        } = config;
        let tok_emb = gaussian_init(&mut rng, v, d, INIT_STD)?;
        let pos_emb = gaussian_init(&mut rng, max_seq_len, d, INIT_STD)?;
        let blocks = (0..layers)
            .map(|_| {
                Ok(Block {
                    attn_norm: RmsNorm::new(d),
                    attn: AttentionBlock::init(&mut rng, d, heads, INIT_STD)?,
                    ffn_norm: RmsNorm::new(d),
                    ffn: FeedForward::Dense(DenseFfn::init(&mut rng, d, d_ff, INIT_STD)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output = gaussian_init(&mut rng, d, v, INIT_STD)?;
        Ok(Model {
            config,
            tok_emb,
            pos_emb,
            blocks,
            output,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            config: self.config,
            tok_emb: Matrix::zeros(self.tok_emb.rows(), self.tok_emb.cols()),
            pos_emb: Matrix::zeros(self.pos_emb.rows(), self.pos_emb.cols()),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn_norm: RmsNorm {
                        gain: Matrix::zeros(1, b.attn_norm.gain.cols()),
                    },
                    attn: b.attn.zeros_like(),
                    ffn_norm: RmsNorm {
                        gain: Matrix::zeros(1, b.ffn_norm.gain.cols()),
                    },
                    ffn: b.ffn.zeros_like(),
                })
                .collect(),
            output: Matrix::zeros(self.output.rows(), self.output.cols()),
        }
    }

    pub fn is_sparse(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| matches!(b.ffn, FeedForward::Sparse(_)))
    }

    pub fn sparse_layers(&self) -> impl Iterator<Item = &DsmoeLayer> {
        self.blocks.iter().filter_map(|b| match &b.ffn {
            FeedForward::Sparse(m) => Some(m),
            FeedForward::Dense(_) => None,
        })
    }

    pub fn sparse_layers_mut(&mut self) -> impl Iterator<Item = &mut DsmoeLayer> {
        self.blocks.iter_mut().filter_map(|b| match &mut b.ffn {
            FeedForward::Sparse(m) => Some(m),
            FeedForward::Dense(_) => None,
        })
    }

    /// Expert count of the sparse layers, if any.
    pub fn experts(&self) -> Option<usize> {
        self.sparse_layers().next().map(DsmoeLayer::n)
    }

    /// Threshold of the sparse layers, if any.
    pub fn tau(&self) -> Option<f64> {
        self.sparse_layers().next().map(|m| m.tau)
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.sparse_layers_mut().for_each(|m| m.tau = tau);
    }

    /// Every tensor with a stable name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn_norm"), &b.attn_norm.gain));
            out.push((format!("{p}.attn.wq"), &b.attn.wq));
            out.push((format!("{p}.attn.wk"), &b.attn.wk));
            out.push((format!("{p}.attn.wv"), &b.attn.wv));
            out.push((format!("{p}.attn.wo"), &b.attn.wo));
            out.push((format!("{p}.ffn_norm"), &b.ffn_norm.gain));
            match &b.ffn {
                FeedForward::Dense(f) => {
                    out.push((format!("{p}.ffn.w_gate"), &f.w_gate));
                    out.push((format!("{p}.ffn.u_up"), &f.u_up));
                    out.push((format!("{p}.ffn.v_down"), &f.v_down));
                }
                FeedForward::Sparse(m) => {
                    out.push((format!("{p}.moe.gate"), &m.gate));
                    for (i, e) in m.experts.iter().enumerate() {
                        out.push((format!("{p}.moe.experts.{i}.w_gate"), &e.w_gate));
                        out.push((format!("{p}.moe.experts.{i}.u_up"), &e.u_up));
                        out.push((format!("{p}.moe.experts.{i}.v_down"), &e.v_down));
                    }
                }
            }
        }
        out.push(("output".to_string(), &self.output));
        out
    }

    /// Mutable view in the same order as [`Model::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm.gain);
            out.push(&mut b.attn.wq);
            out.push(&mut b.attn.wk);
            out.push(&mut b.attn.wv);
            out.push(&mut b.attn.wo);
            out.push(&mut b.ffn_norm.gain);
            match &mut b.ffn {
                FeedForward::Dense(f) => {
                    out.push(&mut f.w_gate);
                    out.push(&mut f.u_up);
                    out.push(&mut f.v_down);
                }
                FeedForward::Sparse(m) => {
                    out.push(&mut m.gate);
                    for e in &mut m.experts {
                        out.push(&mut e.w_gate);
                        out.push(&mut e.u_up);
                        out.push(&mut e.v_down);
                    }
                }
            }
        }
        out.push(&mut self.output);
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Parameters of FFN / expert blocks; all other parameters (embeddings,
    /// attention, norms, gates, output projection) are always active.
    pub fn ffn_param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match &b.ffn {
                FeedForward::Dense(f) => f.param_count(),
                FeedForward::Sparse(m) => m.expert_param_count(),
            })
            .sum()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `T × vocab` plus the cache for [`Model::backward`].
    pub fn forward(&self, tokens: &[u32], routing: &Routing) -> Result<(Matrix, ModelCache)> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.tok_emb.row(tok as usize);
            let p = self.pos_emb.row(t);
            for ((o, a), b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let (a_in, attn_norm) = b.attn_norm.forward(&x)?;
            let (a_out, attn) = b.attn.forward(&a_in)?;
            x.add_assign(&a_out)?;
            x.ensure_finite(&format!("layer {l} attention"))
                .map_err(|e| layer_error(e, l, "attention"))?;
            let (f_in, ffn_norm) = b.ffn_norm.forward(&x)?;
            let (f_out, ffn) = match &b.ffn {
                FeedForward::Dense(f) => {
                    let (o, c) = f.forward(&f_in)?;
                    (o, FfnCacheKind::Dense(c))
                }
                FeedForward::Sparse(m) => {
                    let (o, c) = m
                        .forward(&f_in, routing)
                        .map_err(|e| layer_error(e, l, "ffn"))?;
                    (o, FfnCacheKind::Sparse(c))
                }
            };
            x.add_assign(&f_out)?;
            x.ensure_finite(&format!("layer {l} ffn"))
                .map_err(|e| layer_error(e, l, "ffn"))?;
            caches.push(BlockCache {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            });
        }
        let logits = x.matmul(&self.output).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("output projection: {m}")),
            e => e,
        })?;
        Ok((
            logits,
            ModelCache {
                tokens: tokens.to_vec(),
                final_hidden: x,
                blocks: caches,
            },
        ))
    }

    /// Gradients of the loss whose upstream gradient w.r.t. the logits is
    /// `d_logits`. `gate_grads`, when present, holds one `T × n` gradient
    /// with respect to gate values for each sparse layer (in layer order).
    pub fn backward(
        &self,
        cache: &ModelCache,
        d_logits: &Matrix,
        gate_grads: Option<&[Matrix]>,
    ) -> Result<Model> {
        if cache.blocks.len() != self.blocks.len()
            || d_logits.shape() != (cache.tokens.len(), self.config.vocab_size)
        {
            return Err(Error::Contract(
                "model cache does not match this model or gradient".into(),
            ));
        }
        let mut grads = self.zeros_like();
        grads.output = cache.final_hidden.t_matmul(d_logits)?;
        let mut d_x = d_logits.matmul_t(&self.output)?;
        let mut sparse_idx = self.sparse_layers().count();
        for (l, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let g = &mut grads.blocks[l];
            let d_f_in = match (&b.ffn, &c.ffn) {
                (FeedForward::Dense(f), FfnCacheKind::Dense(fc)) => {
                    let (d_in, fg) = f.backward(fc, &d_x)?;
                    g.ffn = FeedForward::Dense(fg);
                    d_in
                }
                (FeedForward::Sparse(m), FfnCacheKind::Sparse(mc)) => {
                    sparse_idx -= 1;
                    let extra = gate_grads.map(|gg| &gg[sparse_idx]);
                    let (d_in, mg) = m.backward(mc, &d_x, extra)?;
                    g.ffn = FeedForward::Sparse(mg);
                    d_in
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "layer {l}: cache kind does not match feed-forward kind"
                    )))
                }
            };
            let (d_norm, d_gain) = b.ffn_norm.backward(&c.ffn_norm, &d_f_in)?;
            g.ffn_norm.gain = d_gain;
            d_x.add_assign(&d_norm)?;

            let (d_a_in, ag) = b.attn.backward(&c.attn, &d_x)?;
            g.attn = ag;
            let (d_norm, d_gain) = b.attn_norm.backward(&c.attn_norm, &d_a_in)?;
            g.attn_norm.gain = d_gain;
            d_x.add_assign(&d_norm)?;
        }
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let row = d_x.row(t);
            for (a, b) in grads.tok_emb.row_mut(tok as usize).iter_mut().zip(row) {
                *a += b;
            }
            for (a, b) in grads.pos_emb.row_mut(t).iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(grads)
    }
}

fn layer_error(e: Error, layer: usize, part: &str) -> Error {
    match e {
        Error::Numerical(m) if !m.starts_with("layer") => {
            Error::Numerical(format!("layer {layer} {part}: {m}"))
        }
        e => e,
    }
}

/// Mean next-token cross-entropy and its gradient w.r.t. `logits`.
pub fn cross_entropy(logits: &Matrix, targets: &[u32]) -> Result<(f64, Matrix)> {
    let (t_len, vocab) = logits.shape();
    if targets.len() != t_len {
        return Err(Error::shape("lm_loss", logits.shape(), (targets.len(), 1)));
    }
    if t_len == 0 {
        return Err(Error::Input("lm_loss over zero positions".into()));
    }
    let inv_t = 1.0 / t_len as f64;
    let mut grad = Matrix::zeros(t_len, vocab);
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let y = y as usize;
        if y >= vocab {
            return Err(Error::Input(format!(
                "target {y} out of range for vocab {vocab}"
            )));
        }
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for (g, &z) in grad.row_mut(t).iter_mut().zip(row) {
            *g = (z - log_z).exp() * inv_t;
        }
        grad.row_mut(t)[y] -= inv_t;
    }
    Ok((total * inv_t, grad))
}

/// Mean over positions of `−log softmax(logits)[t][target_t]`.
pub fn lm_loss(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    cross_entropy(logits, targets).map(|(l, _)| l)
}

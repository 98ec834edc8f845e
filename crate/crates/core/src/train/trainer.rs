use serde::{Deserialize, Serialize};

use crate::dense::{cross_entropy, Model};
use crate::error::{Error, Result};
use crate::moe::{GateSource, Routing};
use crate::numeric::{Matrix, Rng};
use crate::train::{sparsity_terms, Adam};

const BATCH_STREAM_SALT: u64 = 0xD50E_BA7C_4E55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dense,
    /// Threshold gate + straight-through estimator.
    DsmoeFull,
    /// Threshold gate, plain gradients (inactive gates are frozen).
    DsmoeNoSte,
    /// Soft `Σ oᵢ·gᵢ` mixture during training; threshold only at inference.
    DsmoeNoG,
}

impl Mode {
    pub fn routing(self) -> Routing<'static> {
        match self {
            Mode::Dense | Mode::DsmoeFull => Routing {
                ste: true,
                use_g: true,
                tau: None,
                gates: GateSource::Learned,
            },
            Mode::DsmoeNoSte => Routing {
                ste: false,
                ..Routing::INFERENCE
            },
            Mode::DsmoeNoG => Routing {
                ste: false,
                use_g: false,
                tau: None,
                gates: GateSource::Learned,
            },
        }
    }

    pub fn is_sparse(self) -> bool {
        self != Mode::Dense
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::DsmoeFull => "dsmoe_full",
            Mode::DsmoeNoSte => "dsmoe_no_ste",
            Mode::DsmoeNoG => "dsmoe_no_g",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub tau: f64,
    /// Multiplier on the sparsity term; 1 gives the plain sum of both losses.
    pub sparsity_weight: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            seq_len: 128,
            steps: 1000,
            tau: 0.5,
            sparsity_weight: 1.0,
            mode: Mode::DsmoeFull,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Param("learning_rate must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Param(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if !self.sparsity_weight.is_finite() || self.sparsity_weight < 0.0 {
            return Err(Error::Param("sparsity_weight must be non-negative".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Param(
                "batch_size and seq_len must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Weights on the two loss terms for [`batch_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lm: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepReport {
    pub lm_loss: f64,
    pub sparsity_loss: f64,
    /// Fraction of (token, layer, expert) triples above the threshold.
    pub active_fraction: f64,
    pub zero_active_tokens: usize,
    pub expert_evaluations: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub sparsity_loss: f64,
    pub active_fraction: f64,
    pub tokens_seen: usize,
}

/// Loss components and parameter gradients for a batch of sequences (each
/// `seq_len + 1` tokens). Both terms are means over every predicted token.
pub fn batch_gradients(
    model: &Model,
    batch: &[Vec<u32>],
    routing: &Routing,
    weights: LossWeights,
) -> Result<(StepReport, Model)> {
    if batch.is_empty() || batch.iter().any(|s| s.len() < 2) {
        return Err(Error::Input(
            "batch needs sequences of at least two tokens".into(),
        ));
    }
    let total_tokens: usize = batch.iter().map(|s| s.len() - 1).sum();
    let mut grads = model.zeros_like();
    let mut report = StepReport::default();
    let mut gate_slots = 0usize;
    let mut active = 0usize;
    for seq in batch {
        let (inputs, targets) = (&seq[..seq.len() - 1], &seq[1..]);
        let share = inputs.len() as f64 / total_tokens as f64;
        let (logits, cache) = model.forward(inputs, routing)?;
        let (lm, mut d_logits) = cross_entropy(&logits, targets)?;
        if !lm.is_finite() {
            return Err(Error::Numerical("language-model loss is not finite".into()));
        }
        report.lm_loss += lm * share;
        d_logits.scale(weights.lm * share);

        let decisions = cache.gate_decisions();
        let gate_grads = if decisions.is_empty() {
            None
        } else {
            let values: Vec<&Matrix> = decisions.iter().map(|d| &d.values).collect();
            let tau = decisions[0].tau;
            let (sum, mut g) = sparsity_terms(&values, tau, routing.use_g)?;
            report.sparsity_loss += sum / total_tokens as f64;
            let w = weights.sparsity / total_tokens as f64;
            g.iter_mut().for_each(|m| m.scale(w));
            for d in &decisions {
                gate_slots += d.values.len();
                active += d.total_active();
                report.zero_active_tokens += d.zero_active_tokens();
            }
            report.expert_evaluations += cache.expert_evaluations();
            Some(g)
        };
        let g = model.backward(&cache, &d_logits, gate_grads.as_deref())?;
        for (acc, part) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            acc.add_assign(part)?;
        }
    }
    report.active_fraction = if gate_slots == 0 {
        1.0
    } else {
        active as f64 / gate_slots as f64
    };
    Ok((report, grads))
}

/// Stateful optimizer loop over a model in one training regime.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    adam: Adam,
    gate_override: Option<f64>,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.mode.is_sparse() != model.is_sparse() {
            return Err(Error::Mode(format!(
                "mode {} cannot train a {} model",
                config.mode.name(),
                if model.is_sparse() { "sparse" } else { "dense" }
            )));
        }
        Ok(Trainer {
            adam: Adam::new(model.tensors()),
            config,
            gate_override: None,
        })
    }

    /// Pin every gate value to `value` (for diagnostics and equivalence checks).
    pub fn force_gates(mut self, value: f64) -> Self {
        self.gate_override = Some(value);
        self
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn routing(&self) -> Routing<'static> {
        let mut r = self.config.mode.routing().with_tau(Some(self.config.tau));
        if let Some(v) = self.gate_override {
            r.gates = GateSource::Constant(v);
        }
        r
    }

    pub fn step(&mut self, model: &mut Model, batch: &[Vec<u32>]) -> Result<StepReport> {
        let weights = LossWeights {
            lm: 1.0,
            sparsity: if self.config.mode.is_sparse() {
                self.config.sparsity_weight
            } else {
                0.0
            },
        };
        let (report, grads) = batch_gradients(model, batch, &self.routing(), weights)?;
        if report.zero_active_tokens > 0 {
            log::debug!(
                "{} token-layer pairs had no active expert",
                report.zero_active_tokens
            );
        }
        self.adam.step(
            model.tensors_mut(),
            grads.tensors(),
            self.config.learning_rate,
        )?;
        if let Some((name, _)) = model
            .named_tensors()
            .into_iter()
            .find(|(_, m)| !m.is_finite())
        {
            return Err(Error::Numerical(format!("parameter {name} diverged")));
        }
        Ok(report)
    }
}

/// `batch_size` windows of `seq_len + 1` tokens at uniformly drawn offsets.
pub fn sample_batch(
    rng: &mut Rng,
    tokens: &[u32],
    batch_size: usize,
    seq_len: usize,
) -> Vec<Vec<u32>> {
    let span = tokens.len() - seq_len;
    (0..batch_size)
        .map(|_| {
            let start = rng.below(span);
            tokens[start..start + seq_len + 1].to_vec()
        })
        .collect()
}

/// Runs `config.steps` optimizer steps on batches drawn from `tokens`.
/// `on_step` sees each record and the updated model (checkpointing, logging).
pub fn train_loop(
    model: &mut Model,
    tokens: &[u32],
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord, &Model) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    let needed = config.batch_size * config.seq_len;
    if tokens.len() <= needed || tokens.len() <= config.seq_len + 1 {
        return Err(Error::Input(format!(
            "training corpus has {} tokens; needs more than batch_size × seq_len = {needed}",
            tokens.len()
        )));
    }
    if config.seq_len > model.config.max_seq_len {
        return Err(Error::Param(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            config.seq_len, model.config.max_seq_len
        )));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut rng = Rng::new(config.seed ^ BATCH_STREAM_SALT);
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch = sample_batch(&mut rng, tokens, config.batch_size, config.seq_len);
        let r = trainer.step(model, &batch)?;
        let rec = TrainRecord {
            step,
            lm_loss: r.lm_loss,
            sparsity_loss: r.sparsity_loss,
            active_fraction: r.active_fraction,
            tokens_seen: step * needed,
        };
        log::info!(
            "step {step} lm {:.4} sparse {:.4} active {:.3}",
            rec.lm_loss,
            rec.sparsity_loss,
            rec.active_fraction
        );
        on_step(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}

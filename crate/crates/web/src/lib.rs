//! Browser demo: train a tiny byte-level model, convert it to DSMoE, then
//! explore thresholds and expert activation from JavaScript.

use dsmoe::eval::{collect_activation_stats, default_taus, tau_sweep};
use dsmoe::moe::{convert_model, Routing};
use dsmoe::train::{sample_batch, Mode, TrainConfig, Trainer};
use dsmoe::{Error, Model, ModelConfig, Result, Rng};
use wasm_bindgen::prelude::*;

const WINDOW: usize = 32;
const BATCH: usize = 4;

/// Small enough to train interactively in a browser tab.
pub fn demo_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        d_model: 32,
        d_ff: 128,
        layers: 4,
        heads: 4,
        max_seq_len: WINDOW,
    }
}

/// Demo state, independent of the JavaScript bindings.
pub struct Session {
    model: Model,
    trainer: Trainer,
    train: Vec<u32>,
    validation: Vec<u32>,
    rng: Rng,
    seed: u64,
    steps: usize,
}

fn trainer_for(model: &Model, mode: Mode, lambda: f64, seed: u64) -> Result<Trainer> {
    Trainer::new(
        model,
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: BATCH,
            seq_len: WINDOW,
            steps: 1,
            tau: model.tau().unwrap_or(0.5),
            sparsity_weight: lambda,
            mode,
            seed,
        },
    )
}

impl Session {
    /// The last tenth of `text` is held out for evaluation.
    pub fn new(text: &str, seed: u64) -> Result<Self> {
        let tokens: Vec<u32> = text.bytes().map(u32::from).collect();
        if tokens.len() < 20 * WINDOW {
            return Err(Error::Input(format!(
                "demo text needs at least {} bytes, got {}",
                20 * WINDOW,
                tokens.len()
            )));
        }
        let cut = tokens.len() * 9 / 10;
        let model = Model::init(demo_config(), seed)?;
        Ok(Session {
            trainer: trainer_for(&model, Mode::Dense, 0.0, seed)?,
            model,
            validation: tokens[cut..].to_vec(),
            train: tokens[..cut].to_vec(),
            rng: Rng::new(seed),
            seed,
            steps: 0,
        })
    }

    pub fn is_sparse(&self) -> bool {
        self.model.is_sparse()
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Runs `steps` optimizer steps and returns the last step's LM loss and
    /// active fraction (1 for the dense model).
    pub fn train(&mut self, steps: usize) -> Result<(f64, f64)> {
        let mut last = (f64::NAN, 1.0);
        for _ in 0..steps {
            let batch = sample_batch(&mut self.rng, &self.train, BATCH, WINDOW);
            let r = self.trainer.step(&mut self.model, &batch)?;
            self.steps += 1;
            last = (r.lm_loss, r.active_fraction);
        }
        Ok(last)
    }

    /// Splits every FFN into `experts` gated experts; later training uses
    /// the full DSMoE regime with sparsity weight `lambda`.
    pub fn convert(&mut self, experts: usize, tau: f64, lambda: f64) -> Result<()> {
        self.model = convert_model(&self.model, experts, tau, self.seed, 0.02)?;
        self.trainer = trainer_for(&self.model, Mode::DsmoeFull, lambda, self.seed)?;
        Ok(())
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        let mode = self.trainer.config.mode;
        self.trainer = trainer_for(&self.model, mode, lambda, self.seed)?;
        Ok(())
    }

    /// `[{tau, ppl, mean_active_experts, activated_param_fraction}, ...]`.
    pub fn sweep_json(&self) -> Result<String> {
        let sweep = tau_sweep(&self.model, &self.validation, WINDOW, &default_taus())?;
        Ok(serde_json::to_string(&sweep.rows).expect("rows serialize"))
    }

    /// Row-major `layers × experts` activation frequencies at `tau`.
    pub fn heatmap(&self, tau: f64) -> Result<Vec<f64>> {
        let routing = Routing::INFERENCE.with_tau(Some(tau));
        let stats = collect_activation_stats(&self.model, &self.validation, WINDOW, &routing)?;
        Ok(stats.per_layer_expert_freq.data().to_vec())
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(text: &str, seed: u32) -> std::result::Result<Demo, JsError> {
        Session::new(text, u64::from(seed))
            .map(|inner| Demo { inner })
            .map_err(js)
    }

    /// `[lm_loss, active_fraction]` after `steps` more steps.
    pub fn train(&mut self, steps: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.inner.train(steps).map(|(l, a)| vec![l, a]).map_err(js)
    }

    pub fn convert(
        &mut self,
        experts: usize,
        tau: f64,
        lambda: f64,
    ) -> std::result::Result<(), JsError> {
        self.inner.convert(experts, tau, lambda).map_err(js)
    }

    #[wasm_bindgen(js_name = setLambda)]
    pub fn set_lambda(&mut self, lambda: f64) -> std::result::Result<(), JsError> {
        self.inner.set_lambda(lambda).map_err(js)
    }

    pub fn sweep(&self) -> std::result::Result<String, JsError> {
        self.inner.sweep_json().map_err(js)
    }

    pub fn heatmap(&self, tau: f64) -> std::result::Result<Vec<f64>, JsError> {
        self.inner.heatmap(tau).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn sparse(&self) -> bool {
        self.inner.is_sparse()
    }

    #[wasm_bindgen(getter)]
    pub fn layers(&self) -> usize {
        self.inner.model().config.layers
    }

    #[wasm_bindgen(getter)]
    pub fn experts(&self) -> usize {
        self.inner.model().experts().unwrap_or(0)
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> usize {
        self.inner.steps
    }
}

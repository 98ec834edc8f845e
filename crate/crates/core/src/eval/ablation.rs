use std::collections::BTreeMap;

use serde::Serialize;

use crate::dense::Model;
use crate::error::{Error, Result};
use crate::eval::{default_taus, evaluate, tau_sweep};
use crate::train::{train_loop, Mode, TrainConfig};

pub const ACTIVATED_PARAM_FORMULA: &str = "activated_param_fraction = (P_always + sum_l (mean_active_l / n) * P_ffn_l) / P_total; P_always counts embeddings, attention, norms, gates and the output projection";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    pub mode: Mode,
    pub sparsity_weight: f64,
    /// `ok` or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub final_lm_loss: Option<f64>,
    /// Validation perplexity with the threshold applied.
    pub final_ppl: Option<f64>,
    /// Threshold used for `final_ppl`.
    pub eval_tau: Option<f64>,
    pub active_fraction: Option<f64>,
    pub activated_param_fraction: Option<f64>,
    /// Gate columns bit-identical to their value before training.
    pub never_updated_gate_columns: Option<usize>,
}

impl ArmReport {
    fn failed(mode: Mode, sparsity_weight: f64, e: &Error) -> Self {
        ArmReport {
            mode,
            sparsity_weight,
            status: "failed".into(),
            error: Some(e.to_string()),
            final_lm_loss: None,
            final_ppl: None,
            eval_tau: None,
            active_fraction: None,
            activated_param_fraction: None,
            never_updated_gate_columns: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub activated_param_formula: &'static str,
    pub steps: usize,
    pub tau: f64,
    pub arms: BTreeMap<String, ArmReport>,
}

/// Number of gate columns (over all layers) unchanged bit-for-bit.
fn frozen_gate_columns(before: &Model, after: &Model) -> usize {
    before
        .sparse_layers()
        .zip(after.sparse_layers())
        .map(|(a, b)| {
            (0..a.n())
                .filter(|&i| (0..a.gate.rows()).all(|r| a.gate.get(r, i) == b.gate.get(r, i)))
                .count()
        })
        .sum()
}

struct Trained {
    model: Model,
    lm_loss: f64,
}

fn train_arm(start: &Model, train: &[u32], config: &TrainConfig) -> Result<Trained> {
    let mut model = start.clone();
    let log = train_loop(&mut model, train, config, |_, _| Ok(()))?;
    Ok(Trained {
        lm_loss: log.last().map_or(f64::NAN, |r| r.lm_loss),
        model,
    })
}

fn report(
    start: &Model,
    trained: &Trained,
    config: &TrainConfig,
    val: &[u32],
    window: usize,
    tau: f64,
) -> Result<ArmReport> {
    let e = evaluate(&trained.model, val, window, Some(tau))?;
    let s = e.stats.expect("sparse model yields stats");
    if !e.ppl.is_finite() {
        return Err(Error::Numerical(
            "validation perplexity is not finite".into(),
        ));
    }
    Ok(ArmReport {
        mode: config.mode,
        sparsity_weight: config.sparsity_weight,
        status: "ok".into(),
        error: None,
        final_lm_loss: Some(trained.lm_loss),
        final_ppl: Some(e.ppl),
        eval_tau: Some(tau),
        active_fraction: Some(s.overall_active_fraction),
        activated_param_fraction: Some(s.activated_param_fraction),
        never_updated_gate_columns: Some(frozen_gate_columns(start, &trained.model)),
    })
}

/// Trains four arms from the same converted model and data order:
/// `dsmoe_full`, `dsmoe_no_ste`, `dsmoe_no_g` and a `lambda_0` control
/// (full regime without the sparsity term). The soft-gate arm is evaluated
/// with the threshold at the sweep point whose activation level is closest
/// to `dsmoe_full`'s.
pub fn run_ablation_suite(
    converted: &Model,
    train: &[u32],
    val: &[u32],
    base: &TrainConfig,
    window: usize,
) -> Result<AblationReport> {
    if !converted.is_sparse() {
        return Err(Error::Mode(
            "ablation starts from a converted DSMoE model".into(),
        ));
    }
    let arm_config = |mode: Mode, lambda: f64| TrainConfig {
        mode,
        sparsity_weight: lambda,
        ..base.clone()
    };
    let mut arms = BTreeMap::new();
    let mut full_active = None;
    for (name, mode, lambda) in [
        ("dsmoe_full", Mode::DsmoeFull, base.sparsity_weight),
        ("dsmoe_no_ste", Mode::DsmoeNoSte, base.sparsity_weight),
        ("lambda_0", Mode::DsmoeFull, 0.0),
    ] {
        let cfg = arm_config(mode, lambda);
        log::info!("ablation arm {name}");
        let r = train_arm(converted, train, &cfg)
            .and_then(|t| report(converted, &t, &cfg, val, window, base.tau))
            .unwrap_or_else(|e| ArmReport::failed(mode, lambda, &e));
        if name == "dsmoe_full" {
            full_active = r.active_fraction;
        }
        arms.insert(name.to_string(), r);
    }

    let cfg = arm_config(Mode::DsmoeNoG, base.sparsity_weight);
    log::info!("ablation arm dsmoe_no_g");
    let no_g = train_arm(converted, train, &cfg).and_then(|t| {
        let tau = match full_active {
            Some(target) => {
                let sweep = tau_sweep(&t.model, val, window, &default_taus())?;
                let n = t.model.experts().unwrap_or(1) as f64;
                sweep
                    .rows
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.mean_active_experts / n - target).abs();
                        let db = (b.mean_active_experts / n - target).abs();
                        da.total_cmp(&db)
                    })
                    .map_or(base.tau, |r| r.tau)
            }
            None => base.tau,
        };
        report(converted, &t, &cfg, val, window, tau)
    });
    arms.insert(
        "dsmoe_no_g".to_string(),
        no_g.unwrap_or_else(|e| ArmReport::failed(Mode::DsmoeNoG, base.sparsity_weight, &e)),
    );
    Ok(AblationReport {
        activated_param_formula: ACTIVATED_PARAM_FORMULA,
        steps: base.steps,
        tau: base.tau,
        arms,
    })
}

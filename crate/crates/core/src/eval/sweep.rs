use std::fmt::Write as _;

use serde::Serialize;

use crate::dense::Model;
use crate::error::{Error, Result};
use crate::eval::evaluate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub ppl: f64,
    pub mean_active_experts: f64,
    pub activated_param_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

const HEADER: &str = "tau,ppl,mean_active_experts,activated_param_fraction";

impl SweepResult {
    /// Shortest round-trip float formatting, so parsing is exact.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.tau, r.ppl, r.mean_active_experts, r.activated_param_fraction
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Input(format!(
                "sweep csv must start with `{HEADER}`"
            )));
        }
        let rows = lines
            .map(|line| {
                let v = line
                    .split(',')
                    .map(|f| f.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Input(format!("sweep row `{line}`: {e}")))?;
                match v[..] {
                    [tau, ppl, mean_active_experts, activated_param_fraction] => Ok(SweepRow {
                        tau,
                        ppl,
                        mean_active_experts,
                        activated_param_fraction,
                    }),
                    _ => Err(Error::Input(format!("sweep row `{line}` needs 4 fields"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepResult { rows })
    }
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_taus() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

/// One thresholded evaluation per `τ`. The model is not modified.
pub fn tau_sweep(
    model: &Model,
    tokens: &[u32],
    window: usize,
    taus: &[f64],
) -> Result<SweepResult> {
    if !model.is_sparse() {
        return Err(Error::Mode("threshold sweep needs a DSMoE model".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Param(format!("sweep threshold {t} outside (0, 1)")));
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Param(
            "sweep thresholds must be strictly increasing".into(),
        ));
    }
    let rows = taus
        .iter()
        .map(|&tau| {
            let e = evaluate(model, tokens, window, Some(tau))?;
            let s = e.stats.expect("sparse model yields stats");
            Ok(SweepRow {
                tau,
                ppl: e.ppl,
                mean_active_experts: s.mean_active_experts(),
                activated_param_fraction: s.activated_param_fraction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}

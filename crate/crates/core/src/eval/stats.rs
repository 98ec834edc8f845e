use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::dense::{cross_entropy, Model};
use crate::error::{Error, Result};
use crate::moe::Routing;
use crate::numeric::Matrix;

/// Per-layer, per-expert activation frequencies over an evaluation stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationStats {
    /// `L × n`, fraction of tokens for which expert `(l, i)` was active.
    #[serde(serialize_with = "ser_matrix")]
    pub per_layer_expert_freq: Matrix,
    pub mean_active_per_layer: Vec<f64>,
    pub overall_active_fraction: f64,
    pub activated_param_fraction: f64,
    /// Fraction of (token, layer) pairs with no active expert.
    pub zero_active_token_rate: f64,
}

fn ser_matrix<S: serde::Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.rows()))?;
    for r in 0..m.rows() {
        seq.serialize_element(m.row(r))?;
    }
    seq.end()
}

impl ActivationStats {
    pub fn layers(&self) -> usize {
        self.per_layer_expert_freq.rows()
    }

    pub fn experts(&self) -> usize {
        self.per_layer_expert_freq.cols()
    }

    /// Average number of active experts per token, averaged over layers.
    pub fn mean_active_experts(&self) -> f64 {
        let l = self.mean_active_per_layer.len();
        self.mean_active_per_layer.iter().sum::<f64>() / l as f64
    }

    /// Heatmap CSV: header `layer,e0,...`, one row per layer, six decimals.
    pub fn to_heatmap_csv(&self) -> String {
        let mut s = String::from("layer");
        for i in 0..self.experts() {
            let _ = write!(s, ",e{i}");
        }
        s.push('\n');
        for l in 0..self.layers() {
            let _ = write!(s, "{l}");
            for &f in self.per_layer_expert_freq.row(l) {
                let _ = write!(s, ",{f:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Parses a heatmap CSV back into its `L × n` frequency matrix.
pub fn parse_heatmap_csv(text: &str) -> Result<Matrix> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Input("empty heatmap csv".into()))?;
    let n = header.split(',').count() - 1;
    if !header.starts_with("layer") {
        return Err(Error::Input(
            "heatmap csv header must start with `layer`".into(),
        ));
    }
    let mut rows = Vec::new();
    for (l, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 1 || fields[0].parse::<usize>().ok() != Some(l) {
            return Err(Error::Input(format!("malformed heatmap row {l}: {line}")));
        }
        let row = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Input(format!("heatmap row {l}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

pub fn export_heatmap(stats: &ActivationStats, path: &Path) -> Result<()> {
    std::fs::write(path, stats.to_heatmap_csv()).map_err(|e| Error::io(path, e))
}

/// Result of one teacher-forced pass over an evaluation stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub ppl: f64,
    pub mean_nll: f64,
    pub predicted_tokens: usize,
    pub tau: Option<f64>,
    /// `None` for dense models.
    pub stats: Option<ActivationStats>,
    /// Expert blocks actually run, summed over tokens and layers.
    pub expert_evaluations: usize,
    /// `Σ active_count` over tokens and layers.
    pub active_total: usize,
}

/// Splits `tokens` into consecutive windows of `window + 1` tokens that
/// overlap by one, so every token after the first is predicted exactly once.
fn windows(tokens: &[u32], window: usize) -> impl Iterator<Item = &[u32]> {
    let n = tokens.len();
    (0..)
        .map(move |k| k * window)
        .take_while(move |&s| s + 1 < n)
        .map(move |s| &tokens[s..(s + window + 1).min(n)])
}

pub fn evaluate_with(
    model: &Model,
    tokens: &[u32],
    window: usize,
    routing: &Routing,
) -> Result<Evaluation> {
    if tokens.len() < 2 {
        return Err(Error::Input(
            "evaluation corpus needs at least two tokens".into(),
        ));
    }
    if window == 0 || window > model.config.max_seq_len {
        return Err(Error::Param(format!(
            "evaluation window {window} must be in 1..={}",
            model.config.max_seq_len
        )));
    }
    let sparse: Vec<_> = model.sparse_layers().collect();
    let n = sparse.first().map_or(0, |m| m.n());
    let mut counts = Matrix::zeros(sparse.len(), n.max(1));
    let mut zero_active = 0usize;
    let mut nll = 0.0;
    let mut predicted = 0usize;
    let mut evaluations = 0usize;
    for w in windows(tokens, window) {
        let (inputs, targets) = (&w[..w.len() - 1], &w[1..]);
        let (logits, cache) = model.forward(inputs, routing)?;
        let (loss, _) = cross_entropy(&logits, targets)?;
        nll += loss * inputs.len() as f64;
        predicted += inputs.len();
        evaluations += cache.expert_evaluations();
        for (l, d) in cache.gate_decisions().into_iter().enumerate() {
            zero_active += d.zero_active_tokens();
            for t in 0..d.tokens() {
                for i in 0..n {
                    if d.is_active(t, i) {
                        counts.set(l, i, counts.get(l, i) + 1.0);
                    }
                }
            }
        }
    }
    let mean_nll = nll / predicted as f64;
    let active_total = counts.data().iter().sum::<f64>() as usize;
    let stats = (!sparse.is_empty()).then(|| {
        let freq = counts.map(|c| c / predicted as f64);
        let mean_active_per_layer: Vec<f64> = (0..freq.rows())
            .map(|l| freq.row(l).iter().sum::<f64>())
            .collect();
        let layers = sparse.len() as f64;
        let overall = mean_active_per_layer.iter().sum::<f64>() / (layers * n as f64);
        let total = model.param_count() as f64;
        let always = (model.param_count() - model.ffn_param_count()) as f64;
        let active_ffn: f64 = sparse
            .iter()
            .zip(&mean_active_per_layer)
            .map(|(m, &k)| k / n as f64 * m.expert_param_count() as f64)
            .sum();
        ActivationStats {
            per_layer_expert_freq: freq,
            mean_active_per_layer,
            overall_active_fraction: overall,
            activated_param_fraction: (always + active_ffn) / total,
            zero_active_token_rate: zero_active as f64 / (predicted as f64 * layers),
        }
    });
    Ok(Evaluation {
        ppl: mean_nll.exp(),
        mean_nll,
        predicted_tokens: predicted,
        tau: routing.tau.or(model.tau()),
        stats,
        expert_evaluations: evaluations,
        active_total,
    })
}

/// Thresholded inference evaluation, optionally at a different `τ`.
pub fn evaluate(
    model: &Model,
    tokens: &[u32],
    window: usize,
    tau: Option<f64>,
) -> Result<Evaluation> {
    evaluate_with(model, tokens, window, &Routing::INFERENCE.with_tau(tau))
}

/// `exp` of the mean per-token cross-entropy under teacher forcing.
pub fn perplexity(model: &Model, tokens: &[u32], window: usize, tau: Option<f64>) -> Result<f64> {
    evaluate(model, tokens, window, tau).map(|e| e.ppl)
}

pub fn collect_activation_stats(
    model: &Model,
    tokens: &[u32],
    window: usize,
    routing: &Routing,
) -> Result<ActivationStats> {
    if !model.is_sparse() {
        return Err(Error::Mode(
            "activation statistics need a DSMoE model".into(),
        ));
    }
    Ok(evaluate_with(model, tokens, window, routing)?
        .stats
        .expect("sparse model yields stats"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_each_target_once() {
        let t: Vec<u32> = (0..10).collect();
        let w: Vec<&[u32]> = windows(&t, 4).collect();
        assert_eq!(w, vec![&t[0..5], &t[4..9], &t[8..10]]);
        let predicted: usize = w.iter().map(|w| w.len() - 1).sum();
        assert_eq!(predicted, 9);
    }

    #[test]
    fn heatmap_shape_and_saturation() {
        let stats = ActivationStats {
            per_layer_expert_freq: Matrix::filled(4, 8, 1.0),
            mean_active_per_layer: vec![8.0; 4],
            overall_active_fraction: 1.0,
            activated_param_fraction: 1.0,
            zero_active_token_rate: 0.0,
        };
        let csv = stats.to_heatmap_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "layer,e0,e1,e2,e3,e4,e5,e6,e7");
        for l in &lines[1..] {
            assert!(l.split(',').skip(1).all(|c| c == "1.000000"));
        }
        assert_eq!(
            parse_heatmap_csv(&csv).unwrap(),
            stats.per_layer_expert_freq
        );
    }

    #[test]
    fn heatmap_rejects_garbage() {
        assert!(parse_heatmap_csv("").is_err());
        assert!(parse_heatmap_csv("layer,e0\n0,abc\n").is_err());
        assert!(parse_heatmap_csv("layer,e0\n1,0.5\n").is_err());
    }
}

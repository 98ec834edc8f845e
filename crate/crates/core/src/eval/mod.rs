//! Perplexity, expert-activation statistics, threshold sweeps, heatmap
//! export and the regime ablation harness.

mod ablation;
mod stats;
mod sweep;

pub use ablation::{run_ablation_suite, AblationReport, ArmReport, ACTIVATED_PARAM_FORMULA};
pub use stats::{
    collect_activation_stats, evaluate, evaluate_with, export_heatmap, parse_heatmap_csv,
    perplexity, ActivationStats, Evaluation,
};
pub use sweep::{default_taus, tau_sweep, SweepResult, SweepRow};

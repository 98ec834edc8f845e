//! Optimization: Adam, the combined LM + sparsity objective, and the
//! training regimes used for the ablations.

mod adam;
mod loss;
mod trainer;

pub use adam::Adam;
pub use loss::{sparsity_loss, sparsity_terms, total_loss};
pub use trainer::{
    batch_gradients, sample_batch, train_loop, LossWeights, Mode, StepReport, TrainConfig,
    TrainRecord, Trainer,
};

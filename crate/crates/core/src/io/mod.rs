//! Files: checkpoints, corpora and run configuration.

mod checkpoint;
mod config;
mod corpus;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, Manifest, ModelKind, TensorEntry,
    FORMAT_VERSION, MANIFEST_FILE, WEIGHTS_FILE,
};
pub use config::RunConfig;
pub use corpus::{load_corpus, split_tokens, Corpus};

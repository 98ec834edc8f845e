use std::path::Path;

use crate::error::{Error, Result};

/// Byte-level token stream split into a training prefix and a validation
/// suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
}

/// Split at `floor((1 − val_fraction) · len)`.
pub fn split_tokens(bytes: &[u8], val_fraction: f64) -> Result<Corpus> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Param(format!(
            "validation fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let len = bytes.len();
    // Round the product to 1e-9 before flooring so that e.g. 0.95 × 1000
    // lands on 950 despite binary representation error.
    let raw = (1.0 - val_fraction) * len as f64;
    let boundary = ((raw * 1e9).round() / 1e9).floor() as usize;
    let tokens: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
    let (train, validation) = tokens.split_at(boundary.min(len));
    Ok(Corpus {
        train: train.to_vec(),
        validation: validation.to_vec(),
    })
}

/// Reads a text file as bytes (vocabulary 256). The file must hold at least
/// `10 × seq_len` bytes.
pub fn load_corpus(path: &Path, val_fraction: f64, seq_len: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let min = 10 * seq_len;
    if bytes.len() < min || bytes.is_empty() {
        return Err(Error::Input(format!(
            "{}: corpus has {} bytes, needs at least {min} (10 × seq_len)",
            path.display(),
            bytes.len()
        )));
    }
    split_tokens(&bytes, val_fraction)
}

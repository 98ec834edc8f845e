use crate::error::{Error, Result};
use crate::numeric::Matrix;

const EPS: f64 = 1e-5;

/// Row-wise RMS normalization with a learned gain (stored as a `1 × d` matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm {
    pub gain: Matrix,
}

#[derive(Debug, Clone)]
pub struct RmsNormCache {
    input: Matrix,
    inv_rms: Vec<f64>,
}

impl RmsNorm {
    pub fn new(d: usize) -> Self {
        RmsNorm {
            gain: Matrix::filled(1, d, 1.0),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, RmsNormCache)> {
        let d = self.gain.cols();
        if x.cols() != d {
            return Err(Error::shape("rms_norm", x.shape(), self.gain.shape()));
        }
        let mut out = x.clone();
        let mut inv_rms = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            let row = out.row_mut(t);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + EPS).sqrt();
            for (v, g) in row.iter_mut().zip(self.gain.data()) {
                *v *= r * g;
            }
            inv_rms.push(r);
        }
        Ok((
            out,
            RmsNormCache {
                input: x.clone(),
                inv_rms,
            },
        ))
    }

    /// Returns `(∂L/∂x, ∂L/∂gain)`.
    pub fn backward(&self, cache: &RmsNormCache, d_out: &Matrix) -> Result<(Matrix, Matrix)> {
        if d_out.shape() != cache.input.shape() {
            return Err(Error::Contract(
                "rms_norm gradient does not match cache".into(),
            ));
        }
        let d = self.gain.cols();
        let gain = self.gain.data();
        let mut d_x = Matrix::zeros(d_out.rows(), d);
        let mut d_gain = Matrix::zeros(1, d);
        for t in 0..d_out.rows() {
            let x = cache.input.row(t);
            let dy = d_out.row(t);
            let r = cache.inv_rms[t];
            let mut proj = 0.0;
            for j in 0..d {
                d_gain.data_mut()[j] += dy[j] * x[j] * r;
                proj += gain[j] * dy[j] * x[j];
            }
            let k = r * r * r * proj / d as f64;
            for (j, out) in d_x.row_mut(t).iter_mut().enumerate() {
                *out = r * gain[j] * dy[j] - k * x[j];
            }
        }
        Ok((d_x, d_gain))
    }
}

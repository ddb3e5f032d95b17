//! Minimal neural numeric core with closed-form backward passes.
//!
//! Everything is `f64`. Layers own their parameters as flat row-major
//! buffers; a layer of the same shape doubles as its gradient accumulator.

mod adam;
mod dense;
mod gate;
mod gradcheck;
mod loss;
mod lstm;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use dense::DenseLayer;
pub use gate::{gumbel_sigmoid_gate, GateSample};
pub use gradcheck::grad_check;
pub use loss::{bce_loss, mask_sparsity_penalty, BCE_EPSILON};
pub use lstm::{BiLstm, BiLstmTrace, LstmBlock, LstmTrace};
pub use params::{read_params, write_params, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("uniform draw {0} is outside (0, 1)")]
    InvalidDraw(f64),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("parameter file: {0}")]
    Format(String),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Named access to every parameter buffer, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<Tensor>;
    fn buffers_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.data).collect()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<(), NnError> {
        let mut buffers = self.buffers_mut();
        let total: usize = buffers.iter().map(|b| b.len()).sum();
        if total != flat.len() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for b in buffers.iter_mut() {
            b.copy_from_slice(&flat[offset..offset + b.len()]);
            offset += b.len();
        }
        Ok(())
    }

    fn fill_zero(&mut self) {
        for b in self.buffers_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

use rand::Rng;

use super::{NnError, Parameters, Tensor};

/// Fully connected layer computing `W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Vec<f64>, bias: Vec<f64>, in_dim: usize, out_dim: usize) -> Result<Self, NnError> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(NnError::ShapeMismatch(format!(
                "dense {out_dim}x{in_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.in_dim {
            return Err(NnError::ShapeMismatch(format!(
                "dense expects input of length {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked forward pass for hot loops; lengths must already agree.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grads` and, if requested, writes
    /// the gradient with respect to the input into `grad_in`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut DenseLayer, grad_in: Option<&mut [f64]>) {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let row = &mut grads.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += g * xi;
            }
        }
        if let Some(grad_in) = grad_in {
            grad_in.iter_mut().for_each(|v| *v = 0.0);
            for (row, &g) in self.weights.chunks_exact(self.in_dim).zip(grad_out) {
                for (gi, w) in grad_in.iter_mut().zip(row) {
                    *gi += g * w;
                }
            }
        }
    }
}

impl Parameters for DenseLayer {
    fn tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::new("weight", vec![self.out_dim, self.in_dim], self.weights.clone()),
            Tensor::new("bias", vec![self.out_dim], self.bias.clone()),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_forward() {
        let layer = DenseLayer::new(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2).unwrap();
        assert_eq!(layer.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn row_vector_forward() {
        let layer = DenseLayer::new(vec![1.0, 1.0], vec![0.5], 2, 1).unwrap();
        assert_eq!(layer.forward(&[1.0, 2.0]).unwrap(), vec![3.5]);
    }

    #[test]
    fn wrong_input_length() {
        let layer = DenseLayer::zeros(3, 2);
        assert!(matches!(layer.forward(&[1.0]), Err(NnError::ShapeMismatch(_))));
        assert!(DenseLayer::new(vec![0.0; 5], vec![0.0; 2], 3, 2).is_err());
    }

    #[test]
    fn backward_matches_hand_derivation() {
        let layer = DenseLayer::new(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0], 2, 2).unwrap();
        let mut grads = DenseLayer::zeros(2, 2);
        let mut gin = vec![0.0; 2];
        layer.backward(&[5.0, 6.0], &[1.0, -1.0], &mut grads, Some(&mut gin));
        assert_eq!(grads.weights, vec![5.0, 6.0, -5.0, -6.0]);
        assert_eq!(grads.bias, vec![1.0, -1.0]);
        assert_eq!(gin, vec![1.0 - 3.0, 2.0 - 4.0]);
    }
}

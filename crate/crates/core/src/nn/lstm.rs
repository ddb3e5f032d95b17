use rand::Rng;

use super::{sigmoid, NnError, Parameters, Tensor};

/// One LSTM direction. Gate blocks are stacked in the order input, forget,
/// cell candidate, output; every matrix is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmBlock {
    pub input_dim: usize,
    pub hidden: usize,
    /// `4H × d`
    pub w: Vec<f64>,
    /// `4H × H`
    pub u: Vec<f64>,
    /// `4H`
    pub b: Vec<f64>,
}

/// Activations recorded by a forward run, needed for backpropagation.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    /// Per processed step: activated gates `[i, f, g, o]`, each `H` long.
    gates: Vec<f64>,
    /// Cell states `c_0 = 0, c_1, …, c_T`.
    cells: Vec<f64>,
    /// Hidden states `h_0 = 0, h_1, …, h_T`.
    hiddens: Vec<f64>,
    steps: usize,
}

impl LstmTrace {
    pub fn final_hidden(&self) -> &[f64] {
        let h = self.hiddens.len() / (self.steps + 1);
        &self.hiddens[self.steps * h..]
    }
}

impl LstmBlock {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmBlock {
            input_dim,
            hidden,
            w: vec![0.0; 4 * hidden * input_dim],
            u: vec![0.0; 4 * hidden * hidden],
            b: vec![0.0; 4 * hidden],
        }
    }

    /// Uniform `±1/√H` weights with the forget-gate bias set to one.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut block = Self::zeros(input_dim, hidden);
        block.w.iter_mut().for_each(|v| *v = rng.random_range(-k..k));
        block.u.iter_mut().for_each(|v| *v = rng.random_range(-k..k));
        block.b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        block
    }

    /// Runs the recurrence over `seq` (`T × d`, row-major) from zero state,
    /// right-to-left when `reverse` is set.
    pub fn run(&self, seq: &[f64], reverse: bool) -> LstmTrace {
        let (d, h) = (self.input_dim, self.hidden);
        let steps = seq.len() / d;
        let mut trace = LstmTrace {
            gates: Vec::with_capacity(steps * 4 * h),
            cells: vec![0.0; h],
            hiddens: vec![0.0; h],
            steps,
        };
        let mut z = vec![0.0; 4 * h];
        for step in 0..steps {
            let t = if reverse { steps - 1 - step } else { step };
            let x = &seq[t * d..(t + 1) * d];
            let h_prev = &trace.hiddens[step * h..(step + 1) * h];
            for (r, zr) in z.iter_mut().enumerate() {
                let wx: f64 = self.w[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
                let uh: f64 = self.u[r * h..(r + 1) * h].iter().zip(h_prev).map(|(a, b)| a * b).sum();
                *zr = wx + uh + self.b[r];
            }
            let c_prev_start = step * h;
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let g_g = z[2 * h + j].tanh();
                let o_g = sigmoid(z[3 * h + j]);
                z[j] = i_g;
                z[h + j] = f_g;
                z[2 * h + j] = g_g;
                z[3 * h + j] = o_g;
                let c = f_g * trace.cells[c_prev_start + j] + i_g * g_g;
                trace.cells.push(c);
            }
            for j in 0..h {
                let c = trace.cells[(step + 1) * h + j];
                trace.hiddens.push(z[3 * h + j] * c.tanh());
            }
            trace.gates.extend_from_slice(&z);
        }
        trace
    }

    /// Backpropagates `dh_final` (gradient of the loss with respect to the
    /// last hidden state) through a recorded run, accumulating into `grads`.
    /// Writes the input gradient into `dx` (shaped like `seq`) when given.
    pub fn backprop(
        &self,
        seq: &[f64],
        reverse: bool,
        trace: &LstmTrace,
        dh_final: &[f64],
        grads: &mut LstmBlock,
        mut dx: Option<&mut [f64]>,
    ) {
        let (d, h) = (self.input_dim, self.hidden);
        let steps = trace.steps;
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        if let Some(dx) = dx.as_deref_mut() {
            dx.iter_mut().for_each(|v| *v = 0.0);
        }
        for step in (0..steps).rev() {
            let t = if reverse { steps - 1 - step } else { step };
            let x = &seq[t * d..(t + 1) * d];
            let gates = &trace.gates[step * 4 * h..(step + 1) * 4 * h];
            let c = &trace.cells[(step + 1) * h..(step + 2) * h];
            let c_prev = &trace.cells[step * h..(step + 1) * h];
            let h_prev = &trace.hiddens[step * h..(step + 1) * h];
            for j in 0..h {
                let (i_g, f_g, g_g, o_g) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let tc = c[j].tanh();
                let dcj = dc[j] + dh[j] * o_g * (1.0 - tc * tc);
                dz[j] = dcj * g_g * i_g * (1.0 - i_g);
                dz[h + j] = dcj * c_prev[j] * f_g * (1.0 - f_g);
                dz[2 * h + j] = dcj * i_g * (1.0 - g_g * g_g);
                dz[3 * h + j] = dh[j] * tc * o_g * (1.0 - o_g);
                dc[j] = dcj * f_g;
            }
            for (r, &g) in dz.iter().enumerate() {
                grads.b[r] += g;
                for (gw, xi) in grads.w[r * d..(r + 1) * d].iter_mut().zip(x) {
                    *gw += g * xi;
                }
                for (gu, hp) in grads.u[r * h..(r + 1) * h].iter_mut().zip(h_prev) {
                    *gu += g * hp;
                }
            }
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (r, &g) in dz.iter().enumerate() {
                for (dhj, u) in dh.iter_mut().zip(&self.u[r * h..(r + 1) * h]) {
                    *dhj += g * u;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxt = &mut dx[t * d..(t + 1) * d];
                for (r, &g) in dz.iter().enumerate() {
                    for (v, w) in dxt.iter_mut().zip(&self.w[r * d..(r + 1) * d]) {
                        *v += g * w;
                    }
                }
            }
        }
    }
}

impl Parameters for LstmBlock {
    fn tensors(&self) -> Vec<Tensor> {
        let (d, h) = (self.input_dim, self.hidden);
        vec![
            Tensor::new("w", vec![4 * h, d], self.w.clone()),
            Tensor::new("u", vec![4 * h, h], self.u.clone()),
            Tensor::new("b", vec![4 * h], self.b.clone()),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}

/// Bidirectional LSTM whose output is the final forward hidden state
/// concatenated with the final backward hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward: LstmBlock,
    pub backward: LstmBlock,
}

#[derive(Debug, Clone)]
pub struct BiLstmTrace {
    pub forward: LstmTrace,
    pub backward: LstmTrace,
    pub output: Vec<f64>,
}

impl BiLstm {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        BiLstm {
            forward: LstmBlock::zeros(input_dim, hidden),
            backward: LstmBlock::zeros(input_dim, hidden),
        }
    }

    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            forward: LstmBlock::init(input_dim, hidden, rng),
            backward: LstmBlock::init(input_dim, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    fn check(&self, seq: &[f64]) -> Result<(), NnError> {
        let d = self.forward.input_dim;
        if seq.is_empty() || seq.len() % d != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "sequence of {} values is not a non-empty T x {d} matrix",
                seq.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, seq: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.trace(seq)?.output)
    }

    pub fn trace(&self, seq: &[f64]) -> Result<BiLstmTrace, NnError> {
        self.check(seq)?;
        let forward = self.forward.run(seq, false);
        let backward = self.backward.run(seq, true);
        let mut output = forward.final_hidden().to_vec();
        output.extend_from_slice(backward.final_hidden());
        Ok(BiLstmTrace {
            forward,
            backward,
            output,
        })
    }

    /// Accumulates gradients for `grad_out` (length `2H`) into `grads`.
    pub fn backprop(
        &self,
        seq: &[f64],
        trace: &BiLstmTrace,
        grad_out: &[f64],
        grads: &mut BiLstm,
        dx: Option<&mut [f64]>,
    ) {
        let h = self.hidden();
        match dx {
            Some(dx) => {
                let mut dx_back = vec![0.0; dx.len()];
                self.forward
                    .backprop(seq, false, &trace.forward, &grad_out[..h], &mut grads.forward, Some(dx));
                self.backward.backprop(
                    seq,
                    true,
                    &trace.backward,
                    &grad_out[h..],
                    &mut grads.backward,
                    Some(&mut dx_back),
                );
                for (a, b) in dx.iter_mut().zip(dx_back) {
                    *a += b;
                }
            }
            None => {
                self.forward
                    .backprop(seq, false, &trace.forward, &grad_out[..h], &mut grads.forward, None);
                self.backward
                    .backprop(seq, true, &trace.backward, &grad_out[h..], &mut grads.backward, None);
            }
        }
    }
}

impl Parameters for BiLstm {
    fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (prefix, block) in [("fwd", &self.forward), ("bwd", &self.backward)] {
            out.extend(block.tensors().into_iter().map(|t| t.prefixed(prefix)));
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.forward.buffers_mut();
        out.extend(self.backward.buffers_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line scalar LSTM written independently of `LstmBlock::run`:
    /// gates use separate named weight matrices and explicit loops.
    fn oracle_direction(block: &LstmBlock, seq: &[f64], reverse: bool) -> Vec<f64> {
        let (d, hs) = (block.input_dim, block.hidden);
        let steps = seq.len() / d;
        let mut h = vec![0.0; hs];
        let mut c = vec![0.0; hs];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
        for t in order {
            let pre = |gate: usize, j: usize, h: &[f64]| -> f64 {
                let row = gate * hs + j;
                let mut s = block.b[row];
                for k in 0..d {
                    s += block.w[row * d + k] * seq[t * d + k];
                }
                for k in 0..hs {
                    s += block.u[row * hs + k] * h[k];
                }
                s
            };
            let mut h_new = vec![0.0; hs];
            for j in 0..hs {
                let i = logistic(pre(0, j, &h));
                let f = logistic(pre(1, j, &h));
                let g = pre(2, j, &h).tanh();
                let o = logistic(pre(3, j, &h));
                c[j] = f * c[j] + i * g;
                h_new[j] = o * c[j].tanh();
            }
            h = h_new;
        }
        h
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let cell = BiLstm::zeros(1, 3);
        assert_eq!(cell.forward(&[0.4, -1.0, 2.0]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn single_step_directions_agree_with_shared_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = LstmBlock::init(2, 3, &mut rng);
        let cell = BiLstm {
            forward: block.clone(),
            backward: block,
        };
        let out = cell.forward(&[0.3, -0.7]).unwrap();
        assert_eq!(out[..3], out[3..]);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cell = BiLstm::init(1, 2, &mut rng);
        let seq = [0.5, -1.2, 0.8];
        let out = cell.forward(&seq).unwrap();
        let mut expected = oracle_direction(&cell.forward, &seq, false);
        expected.extend(oracle_direction(&cell.backward, &seq, true));
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let cell = BiLstm::zeros(2, 2);
        assert!(cell.forward(&[]).is_err());
        assert!(cell.forward(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let d = 1 + trial % 2;
            let cell = BiLstm::init(d, 3, &mut rng);
            let seq: Vec<f64> = (0..4 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let proj: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            // loss = proj · output
            let loss = |flat: &[f64]| {
                let mut c = cell.clone();
                c.set_flat(flat).unwrap();
                let tr = c.trace(&seq).unwrap();
                let value: f64 = tr.output.iter().zip(&proj).map(|(a, b)| a * b).sum();
                let mut grads = BiLstm::zeros(d, 3);
                c.backprop(&seq, &tr, &proj, &mut grads, None);
                (value, grads.flat())
            };
            let err = grad_check(loss, &cell.flat(), 1e-5);
            assert!(err < 1e-7, "trial {trial}: {err}");

            // input gradient
            let tr = cell.trace(&seq).unwrap();
            let mut dx = vec![0.0; seq.len()];
            cell.backprop(&seq, &tr, &proj, &mut BiLstm::zeros(d, 3), Some(&mut dx));
            let err = grad_check(
                |x: &[f64]| {
                    let tr = cell.trace(x).unwrap();
                    let v = tr.output.iter().zip(&proj).map(|(a, b)| a * b).sum();
                    let mut g = vec![0.0; x.len()];
                    cell.backprop(x, &tr, &proj, &mut BiLstm::zeros(d, 3), Some(&mut g));
                    (v, g)
                },
                &seq,
                1e-5,
            );
            assert!(err < 1e-7, "input grad trial {trial}: {err}");
            assert!(dx.iter().any(|v| *v != 0.0));
        }
    }
}

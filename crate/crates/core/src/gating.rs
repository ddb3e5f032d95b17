//! The feature-gating predictor.
//!
//! A discriminator maps a student's flattened features × weeks slice to one
//! logit per feature. A Gumbel-sigmoid gate turns the logits into
//! activations, every feature has its own BiLSTM + dense head predicting the
//! pass probability from that feature's week series, and the overall
//! prediction is the activation-weighted mean of those per-feature
//! predictions. Training minimizes BCE plus an annealed mask penalty.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureCube;
use crate::nn::{
    bce_loss, gumbel_sigmoid_gate, mask_sparsity_penalty, read_params, sigmoid, write_params, AdamConfig,
    AdamState, BiLstm, BiLstmTrace, DenseLayer, GateSample, NnError, Parameters, Tensor,
};
use crate::numfmt::f17;

/// Prediction used when every feature is gated off.
pub const FALLBACK_PREDICTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GatingError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Format(String),
    #[error("io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GatingError + '_ {
    move |source| GatingError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSubnet {
    pub lstm: BiLstm,
    /// `2H → 1`, followed by a sigmoid.
    pub head: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingModel {
    pub feature_names: Vec<String>,
    pub n_weeks: usize,
    /// Flattened slice → hidden, tanh.
    pub disc_hidden: DenseLayer,
    /// Hidden → one logit per feature.
    pub disc_out: DenseLayer,
    pub subnets: Vec<FeatureSubnet>,
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub prediction: f64,
    pub feature_predictions: Vec<f64>,
    pub activations: Vec<f64>,
}

/// Activation-weighted mean of per-feature predictions, or
/// [`FALLBACK_PREDICTION`] when no activation is positive.
pub fn aggregate(activations: &[f64], predictions: &[f64]) -> f64 {
    let total: f64 = activations.iter().sum();
    if total <= 0.0 {
        return FALLBACK_PREDICTION;
    }
    activations.iter().zip(predictions).map(|(a, p)| a * p).sum::<f64>() / total
}

/// How gates are drawn for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum GateMode<'a> {
    /// Zero noise, hard activations.
    Inference,
    /// Zero noise, soft activations (smooth, for gradient checks).
    Soft { temperature: f64 },
    /// Gumbel draws with straight-through or soft activations.
    Sampled {
        temperature: f64,
        draws: Option<&'a [(f64, f64)]>,
        straight_through: bool,
    },
}

struct ForwardCache {
    hidden: Vec<f64>,
    gate: GateSample,
    activations: Vec<f64>,
    traces: Vec<BiLstmTrace>,
    feature_predictions: Vec<f64>,
    prediction: f64,
}

impl GatingModel {
    pub fn new<R: Rng>(
        feature_names: Vec<String>,
        n_weeks: usize,
        disc_hidden: usize,
        lstm_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let nf = feature_names.len();
        let disc_hidden_layer = DenseLayer::glorot(nf * n_weeks, disc_hidden, rng);
        let disc_out = DenseLayer::glorot(disc_hidden, nf, rng);
        let subnets = (0..nf)
            .map(|_| FeatureSubnet {
                lstm: BiLstm::init(1, lstm_hidden, rng),
                head: DenseLayer::glorot(2 * lstm_hidden, 1, rng),
            })
            .collect();
        GatingModel {
            feature_names,
            n_weeks,
            disc_hidden: disc_hidden_layer,
            disc_out,
            subnets,
        }
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Divides each subnet's LSTM input weights by the RMS of its feature
    /// over `students`, so the initial cell sees unit-scale inputs. The
    /// discriminator is left alone. All-zero features keep their weights.
    pub fn scale_input_weights(&mut self, cube: &FeatureCube, students: &[usize]) {
        let nf = self.num_features();
        let nw = self.n_weeks;
        let mut sq = vec![0.0; nf * nw];
        for &s in students {
            for (acc, x) in sq.iter_mut().zip(cube.student_slice(s)) {
                *acc += x * x;
            }
        }
        let count = students.len().max(1) as f64;
        let inv = |sum: f64, n: f64| {
            let rms = (sum / n).sqrt();
            if rms > 0.0 {
                1.0 / rms
            } else {
                1.0
            }
        };
        for (f, subnet) in self.subnets.iter_mut().enumerate() {
            let factor = inv(sq[f * nw..(f + 1) * nw].iter().sum(), count * nw as f64);
            for block in [&mut subnet.lstm.forward, &mut subnet.lstm.backward] {
                block.w.iter_mut().for_each(|w| *w *= factor);
            }
        }
    }

    pub fn lstm_hidden(&self) -> usize {
        self.subnets.first().map(|s| s.lstm.hidden()).unwrap_or(0)
    }

    /// A model of identical shape with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn check_slice(&self, slice: &[f64]) -> Result<(), NnError> {
        let expected = self.num_features() * self.n_weeks;
        if slice.len() != expected {
            return Err(NnError::ShapeMismatch(format!(
                "model expects a {}x{} slice ({expected} values), got {}",
                self.num_features(),
                self.n_weeks,
                slice.len()
            )));
        }
        Ok(())
    }

    fn discriminate(&self, slice: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hidden = vec![0.0; self.disc_hidden.out_dim];
        self.disc_hidden.forward_into(slice, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = vec![0.0; self.num_features()];
        self.disc_out.forward_into(&hidden, &mut logits);
        (hidden, logits)
    }

    /// Per-feature gate logits for a features × weeks slice.
    pub fn logits(&self, slice: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_slice(slice)?;
        Ok(self.discriminate(slice).1)
    }

    /// Forward pass with a caller-supplied gate sample, which should come
    /// from this model's logits on the same slice.
    pub fn forward(&self, slice: &[f64], gate: &GateSample) -> Result<Prediction, NnError> {
        self.check_slice(slice)?;
        if gate.soft.len() != self.num_features() {
            return Err(NnError::ShapeMismatch("gate sample length differs from feature count".into()));
        }
        let activations = gate.activations();
        let feature_predictions: Vec<f64> = (0..self.num_features())
            .map(|f| self.subnet_predict(f, &slice[f * self.n_weeks..(f + 1) * self.n_weeks]).1)
            .collect();
        Ok(Prediction {
            prediction: aggregate(&activations, &feature_predictions),
            feature_predictions,
            activations,
        })
    }

    /// Forward pass drawing the gate from the discriminator per `mode`.
    pub fn predict(&self, slice: &[f64], mode: GateMode<'_>) -> Result<Prediction, NnError> {
        let cache = self.forward_cached(slice, mode)?;
        Ok(Prediction {
            prediction: cache.prediction,
            feature_predictions: cache.feature_predictions,
            activations: cache.activations,
        })
    }

    fn subnet_predict(&self, f: usize, series: &[f64]) -> (BiLstmTrace, f64) {
        let net = &self.subnets[f];
        let trace = net.lstm.trace(series).expect("series length checked");
        let mut q = [0.0];
        net.head.forward_into(&trace.output, &mut q);
        (trace, sigmoid(q[0]))
    }

    fn forward_cached(&self, slice: &[f64], mode: GateMode<'_>) -> Result<ForwardCache, NnError> {
        self.check_slice(slice)?;
        let (hidden, logits) = self.discriminate(slice);
        let gate = match mode {
            GateMode::Inference => gumbel_sigmoid_gate(&logits, 1.0, None, true)?,
            GateMode::Soft { temperature } => gumbel_sigmoid_gate(&logits, temperature, None, false)?,
            GateMode::Sampled {
                temperature,
                draws,
                straight_through,
            } => gumbel_sigmoid_gate(&logits, temperature, draws, straight_through)?,
        };
        let activations = gate.activations();
        let (traces, feature_predictions): (Vec<_>, Vec<_>) = (0..self.num_features())
            .map(|f| self.subnet_predict(f, &slice[f * self.n_weeks..(f + 1) * self.n_weeks]))
            .unzip();
        let prediction = aggregate(&activations, &feature_predictions);
        Ok(ForwardCache {
            hidden,
            gate,
            activations,
            traces,
            feature_predictions,
            prediction,
        })
    }

    /// Accumulates parameter gradients for a cached pass given `dl_dp`, the
    /// loss gradient at the overall prediction, and `dl_dsoft`, any extra
    /// loss gradient at the soft mask (the sparsity penalty).
    fn backward(&self, slice: &[f64], cache: &ForwardCache, dl_dp: f64, dl_dsoft: &[f64], grads: &mut GatingModel) {
        let nf = self.num_features();
        let total: f64 = cache.activations.iter().sum();
        let mut d_soft = dl_dsoft.to_vec();
        if total > 0.0 {
            for f in 0..nf {
                let a = cache.activations[f];
                let pf = cache.feature_predictions[f];
                d_soft[f] += dl_dp * (pf - cache.prediction) / total;
                let dq = dl_dp * a / total * pf * (1.0 - pf);
                if dq == 0.0 {
                    continue;
                }
                let net = &self.subnets[f];
                let trace = &cache.traces[f];
                let mut dh = vec![0.0; net.head.in_dim];
                net.head.backward(&trace.output, &[dq], &mut grads.subnets[f].head, Some(&mut dh));
                let series = &slice[f * self.n_weeks..(f + 1) * self.n_weeks];
                net.lstm.backprop(series, trace, &dh, &mut grads.subnets[f].lstm, None);
            }
        }
        let d_logit: Vec<f64> = d_soft
            .iter()
            .zip(cache.gate.soft_derivative())
            .map(|(g, ds)| g * ds)
            .collect();
        let mut d_hidden = vec![0.0; self.disc_out.in_dim];
        self.disc_out
            .backward(&cache.hidden, &d_logit, &mut grads.disc_out, Some(&mut d_hidden));
        for (g, h) in d_hidden.iter_mut().zip(&cache.hidden) {
            *g *= 1.0 - h * h;
        }
        self.disc_hidden.backward(slice, &d_hidden, &mut grads.disc_hidden, None);
    }

    pub fn save(&self, path: &Path, stamp: &str) -> Result<(), GatingError> {
        let mut buf = Vec::new();
        let header = [
            ("stamp", stamp.to_string()),
            ("features", self.feature_names.join(",")),
            ("weeks", self.n_weeks.to_string()),
        ];
        write_params(&self.tensors(), &header, &mut buf).map_err(io_err(path))?;
        fs::write(path, buf).map_err(io_err(path))
    }

    /// Loads a model file, returning the model and its stamp.
    pub fn load(path: &Path) -> Result<(Self, String), GatingError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let (tensors, header) = read_params(BufReader::new(file))?;
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| GatingError::Format(format!("model file lacks {k:?}")))
        };
        let feature_names: Vec<String> = field("features")?.split(',').map(str::to_string).collect();
        let n_weeks: usize = field("weeks")?
            .parse()
            .map_err(|_| GatingError::Format("bad weeks".into()))?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| GatingError::Format(format!("missing tensor {name}")))
        };
        let disc_hidden = find("disc.hidden.weight")?.shape[0];
        let lstm_hidden = find("subnet.0.lstm.fwd.u")?.shape[1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = GatingModel::new(feature_names, n_weeks, disc_hidden, lstm_hidden, &mut rng);
        let expected = model.tensors();
        if expected.len() != tensors.len() {
            return Err(GatingError::Format("tensor count does not match model shape".into()));
        }
        let mut flat = Vec::with_capacity(model.num_params());
        for e in &expected {
            let t = find(&e.name)?;
            if t.shape != e.shape {
                return Err(GatingError::Format(format!("tensor {} has shape {:?}", e.name, t.shape)));
            }
            flat.extend_from_slice(&t.data);
        }
        model.set_flat(&flat)?;
        Ok((model, field("stamp")?))
    }
}

impl Parameters for GatingModel {
    fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        out.extend(self.disc_hidden.tensors().into_iter().map(|t| t.prefixed("disc.hidden")));
        out.extend(self.disc_out.tensors().into_iter().map(|t| t.prefixed("disc.out")));
        for (i, net) in self.subnets.iter().enumerate() {
            let lstm = format!("subnet.{i}.lstm");
            let head = format!("subnet.{i}.head");
            out.extend(net.lstm.tensors().into_iter().map(|t| t.prefixed(&lstm)));
            out.extend(net.head.tensors().into_iter().map(|t| t.prefixed(&head)));
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.disc_hidden.buffers_mut();
        out.extend(self.disc_out.buffers_mut());
        for net in &mut self.subnets {
            out.extend(net.lstm.buffers_mut());
            out.extend(net.head.buffers_mut());
        }
        out
    }
}

/// One training example's contribution to a batch objective.
pub struct Example<'a> {
    pub slice: &'a [f64],
    pub label: bool,
    pub weight: f64,
    pub draws: Option<&'a [(f64, f64)]>,
}

/// Mean over `examples` of `weight · BCE + λ · mean(soft²)` and its gradient,
/// accumulated in example order.
pub fn batch_objective(
    model: &GatingModel,
    examples: &[Example<'_>],
    temperature: f64,
    lambda: f64,
    straight_through: bool,
    grads: &mut GatingModel,
) -> Result<BatchStats, NnError> {
    let n = examples.len() as f64;
    let mut stats = BatchStats::default();
    for ex in examples {
        let mode = GateMode::Sampled {
            temperature,
            draws: ex.draws,
            straight_through,
        };
        let cache = model.forward_cached(ex.slice, mode)?;
        let (bce, dp) = bce_loss(cache.prediction, ex.label);
        let (penalty, mut dsoft) = mask_sparsity_penalty(&cache.gate.soft, lambda);
        dsoft.iter_mut().for_each(|g| *g /= n);
        if cache.activations.iter().all(|&a| a == 0.0) {
            // The weighted average jumps from the fallback to p_f as soon as
            // gate f opens, so its derivative is useless here. Each gate
            // instead receives the loss change of opening it alone.
            for (g, &pf) in dsoft.iter_mut().zip(&cache.feature_predictions) {
                *g += ex.weight * (bce_loss(pf, ex.label).0 - bce) / n;
            }
        }
        model.backward(ex.slice, &cache, ex.weight * dp / n, &dsoft, grads);
        stats.loss += (ex.weight * bce + penalty) / n;
        stats.soft_density += cache.gate.soft.iter().sum::<f64>() / cache.gate.soft.len().max(1) as f64 / n;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    pub loss: f64,
    pub soft_density: f64,
}

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_temperature_start() -> f64 {
    1.0
}
fn default_temperature_end() -> f64 {
    0.5
}
fn default_lambda_end() -> f64 {
    1.0
}
fn default_validation_fraction() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}
fn default_disc_hidden() -> usize {
    64
}
fn default_lstm_hidden() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Required: the training seed drives initialization, the validation
    /// split, batch order and Gumbel noise.
    pub seed: u64,
    #[serde(default = "default_temperature_start")]
    pub temperature_start: f64,
    #[serde(default = "default_temperature_end")]
    pub temperature_end: f64,
    #[serde(default)]
    pub lambda_start: f64,
    #[serde(default = "default_lambda_end")]
    pub lambda_end: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Weight each class inversely to its frequency.
    #[serde(default)]
    pub class_weighting: bool,
    /// Feed hard gates forward with soft-path gradients while training.
    #[serde(default = "default_true")]
    pub straight_through: bool,
    #[serde(default = "default_disc_hidden")]
    pub disc_hidden: usize,
    #[serde(default = "default_lstm_hidden")]
    pub lstm_hidden: usize,
    /// Rescale each subnet LSTM input weights by its feature RMS over training students.
    #[serde(default = "default_true")]
    pub input_scaled_init: bool,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            seed,
            temperature_start: default_temperature_start(),
            temperature_end: default_temperature_end(),
            lambda_start: 0.0,
            lambda_end: default_lambda_end(),
            validation_fraction: default_validation_fraction(),
            class_weighting: false,
            straight_through: true,
            disc_hidden: default_disc_hidden(),
            lstm_hidden: default_lstm_hidden(),
            input_scaled_init: true,
        }
    }

    pub fn validate(&self) -> Result<(), GatingError> {
        let fail = |m: &str| Err(GatingError::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail("validation_fraction must lie in (0, 1)");
        }
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0) {
            return fail("temperatures must be positive");
        }
        if !(self.lambda_start >= 0.0 && self.lambda_end >= 0.0) {
            return fail("lambda must be non-negative");
        }
        if self.disc_hidden < 1 || self.lstm_hidden < 1 {
            return fail("layer sizes must be positive");
        }
        Ok(())
    }

    /// Fraction of the schedule elapsed at the start of `epoch`.
    fn progress(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            0.0
        } else {
            epoch as f64 / (self.epochs - 1) as f64
        }
    }

    pub fn temperature_at(&self, epoch: usize) -> f64 {
        let t = self.progress(epoch);
        self.temperature_start + (self.temperature_end - self.temperature_start) * t
    }

    pub fn lambda_at(&self, epoch: usize) -> f64 {
        let t = self.progress(epoch);
        self.lambda_start + (self.lambda_end - self.lambda_start) * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub mean_soft_density: f64,
    pub temperature: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self, stamp: &str) -> String {
        let mut out = format!("# {stamp}\nepoch,train_loss,val_loss,val_accuracy,mean_soft_density,temperature,lambda\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                f17(r.train_loss),
                f17(r.val_loss),
                f17(r.val_accuracy),
                f17(r.mean_soft_density),
                f17(r.temperature),
                f17(r.lambda)
            ));
        }
        out
    }
}

/// Aligns labels with the cube's student order.
pub fn align_labels(cube: &FeatureCube, labels: &BTreeMap<String, bool>) -> Result<Vec<bool>, GatingError> {
    let aligned: Vec<bool> = cube
        .student_ids
        .iter()
        .map(|id| {
            labels
                .get(id)
                .copied()
                .ok_or_else(|| GatingError::LabelMismatch(format!("no label for student {id:?}")))
        })
        .collect::<Result<_, _>>()?;
    if labels.len() != aligned.len() {
        let unknown = labels
            .keys()
            .find(|id| !cube.student_ids.contains(id))
            .cloned()
            .unwrap_or_default();
        return Err(GatingError::LabelMismatch(format!("label for unknown student {unknown:?}")));
    }
    Ok(aligned)
}

/// Label-stratified split into (train, validation) student indices.
fn stratified_split(labels: &[bool], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [false, true] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(rng);
        let n_val = ((members.len() as f64 * fraction).round() as usize).min(members.len().saturating_sub(1));
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn uniform_open(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Mean BCE and accuracy with zero-noise hard gates.
pub fn evaluate(model: &GatingModel, cube: &FeatureCube, labels: &[bool], students: &[usize]) -> (f64, f64) {
    if students.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let preds: Vec<f64> = students
        .par_iter()
        .map(|&s| {
            model
                .predict(cube.student_slice(s), GateMode::Inference)
                .expect("cube matches model")
                .prediction
        })
        .collect();
    let n = students.len() as f64;
    let loss = students.iter().zip(&preds).map(|(&s, &p)| bce_loss(p, labels[s]).0).sum::<f64>() / n;
    let correct = students
        .iter()
        .zip(&preds)
        .filter(|(&s, &p)| (p >= 0.5) == labels[s])
        .count();
    (loss, correct as f64 / n)
}

/// Trains a gating model on a scaled cube. Deterministic given `config.seed`.
pub fn train(
    cube: &FeatureCube,
    labels: &BTreeMap<String, bool>,
    config: &TrainConfig,
) -> Result<(GatingModel, TrainHistory), GatingError> {
    config.validate()?;
    if !cube.scaled {
        return Err(GatingError::InvalidConfig("training requires a scaled cube".into()));
    }
    if cube.num_students() < 2 {
        return Err(GatingError::InvalidConfig("need at least two students".into()));
    }
    let labels = align_labels(cube, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = GatingModel::new(
        cube.feature_names.clone(),
        cube.weeks,
        config.disc_hidden,
        config.lstm_hidden,
        &mut rng,
    );
    let (mut train_idx, val_idx) = stratified_split(&labels, config.validation_fraction, &mut rng);
    if config.input_scaled_init {
        model.scale_input_weights(cube, &train_idx);
    }

    let class_weight = |y: bool| -> f64 {
        if !config.class_weighting {
            return 1.0;
        }
        let n = train_idx.len() as f64;
        let n_y = train_idx.iter().filter(|&&i| labels[i] == y).count().max(1) as f64;
        n / (2.0 * n_y)
    };
    let weights = [class_weight(false), class_weight(true)];

    let adam_config = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, model.num_params());
    let mut grads = model.zeros_like();
    let nf = model.num_features();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let temperature = config.temperature_at(epoch);
        let lambda = config.lambda_at(epoch);
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_density = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let draws: Vec<Vec<(f64, f64)>> = batch
                .iter()
                .map(|_| (0..nf).map(|_| (uniform_open(&mut rng), uniform_open(&mut rng))).collect())
                .collect();
            let examples: Vec<Example<'_>> = batch
                .iter()
                .zip(&draws)
                .map(|(&s, d)| Example {
                    slice: cube.student_slice(s),
                    label: labels[s],
                    weight: weights[labels[s] as usize],
                    draws: Some(d),
                })
                .collect();
            grads.fill_zero();
            let stats = batch_objective(&model, &examples, temperature, lambda, config.straight_through, &mut grads)?;
            if !stats.loss.is_finite() {
                return Err(GatingError::NonFinite { epoch });
            }
            let mut params = model.flat();
            adam.step(&mut params, &grads.flat())?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(GatingError::NonFinite { epoch });
            }
            model.set_flat(&params)?;
            let share = batch.len() as f64 / train_idx.len() as f64;
            epoch_loss += stats.loss * share;
            epoch_density += stats.soft_density * share;
        }
        let (val_loss, val_accuracy) = evaluate(&model, cube, &labels, &val_idx);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            val_loss,
            val_accuracy,
            mean_soft_density: epoch_density,
            temperature,
            lambda,
        });
    }
    Ok((model, history))
}

/// Students × features binary matrix of individually important features.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub student_ids: Vec<String>,
    pub feature_names: Vec<String>,
    values: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(student_ids: Vec<String>, feature_names: Vec<String>, values: Vec<bool>) -> Result<Self, GatingError> {
        if values.len() != student_ids.len() * feature_names.len() {
            return Err(GatingError::Format("mask dimensions do not match id lists".into()));
        }
        Ok(MaskMatrix {
            student_ids,
            feature_names,
            values,
        })
    }

    pub fn num_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn get(&self, student: usize, feature: usize) -> bool {
        self.values[student * self.num_features() + feature]
    }

    pub fn row(&self, student: usize) -> &[bool] {
        let nf = self.num_features();
        &self.values[student * nf..(student + 1) * nf]
    }

    /// Fraction of all entries set.
    pub fn density(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().filter(|&&v| v).count() as f64 / self.values.len() as f64
    }

    /// Indices of features set for at least one student.
    pub fn selected_features(&self) -> Vec<usize> {
        (0..self.num_features())
            .filter(|&f| (0..self.num_students()).any(|s| self.get(s, f)))
            .collect()
    }

    pub fn to_csv(&self, stamp: &str) -> String {
        let mut out = format!("# {stamp}\nstudent_id");
        for f in &self.feature_names {
            out.push(',');
            out.push_str(f);
        }
        out.push('\n');
        for (s, id) in self.student_ids.iter().enumerate() {
            out.push_str(id);
            for &v in self.row(s) {
                out.push_str(if v { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }

    /// Parses `masks.csv`, returning the matrix and the stamp comment.
    pub fn from_csv(text: &str) -> Result<(Self, String), GatingError> {
        let stamp = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .unwrap_or_default()
            .to_string();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let bad = |m: String| GatingError::Format(m);
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        let feature_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut student_ids = Vec::new();
        let mut values = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            student_ids.push(record[0].to_string());
            for v in record.iter().skip(1) {
                values.push(match v {
                    "0" => false,
                    "1" => true,
                    other => return Err(bad(format!("mask entry {other:?} is not 0/1"))),
                });
            }
        }
        Ok((MaskMatrix::new(student_ids, feature_names, values)?, stamp))
    }
}

/// Zero-noise gate decisions per student: feature `f` is kept iff
/// `σ(logit_f) ≥ 0.5`.
pub fn extract_masks(model: &GatingModel, cube: &FeatureCube) -> Result<MaskMatrix, GatingError> {
    if cube.feature_names != model.feature_names || cube.weeks != model.n_weeks {
        return Err(NnError::ShapeMismatch("cube features or weeks differ from the model".into()).into());
    }
    let rows: Vec<Vec<bool>> = (0..cube.num_students())
        .into_par_iter()
        .map(|s| {
            let logits = model.logits(cube.student_slice(s))?;
            Ok(gumbel_sigmoid_gate(&logits, 1.0, None, true)?.hard)
        })
        .collect::<Result<_, NnError>>()?;
    MaskMatrix::new(cube.student_ids.clone(), cube.feature_names.clone(), rows.concat())
}

/// Writes a text artifact, mapping failures to [`GatingError::Io`].
pub fn write_text(path: &Path, text: &str) -> Result<(), GatingError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

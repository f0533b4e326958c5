//! ReLU multilayer perceptron trained with Adam against MPC samples,
//! plus the dual-mode controller that switches to the linear feedback
//! inside the maximal admissible set.

use crate::mpc::Sample;
use crate::polytope::HPolytope;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("network needs at least 2 layers (got {0})")]
    TooShallow(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged: loss became non-finite at epoch {0}")]
    Diverged(usize),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("model parse error: {0}")]
    Parse(String),
}

/// Weights and biases of the affine maps; all layers but the last are
/// followed by an elementwise ReLU.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpParams {
    /// Fan-in-scaled uniform initialization (bound sqrt(6 / fan_in)).
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self, NnError> {
        if layer_sizes.len() < 3 {
            // input, at least one hidden, output => L >= 2 affine maps
            return Err(NnError::TooShallow(layer_sizes.len().saturating_sub(1)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.gen_range(-bound..bound)
            }));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self, NnError> {
        if layer_sizes.len() < 3 {
            return Err(NnError::TooShallow(layer_sizes.len().saturating_sub(1)));
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_sizes.windows(2).map(|w| DVector::zeros(w[1])).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch(format!(
                "input length {} vs layer size {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            a = w * a + b;
            if i < last {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    /// Forward pass keeping pre-activations for backprop.
    fn forward_cached(&self, x: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
        let last = self.weights.len() - 1;
        let mut activations = vec![x.clone()];
        let mut a = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let z = w * &a + b;
            if i < last {
                a = z.map(|v| v.max(0.0));
                activations.push(a.clone());
            } else {
                a = z;
            }
        }
        (activations, a)
    }

    /// Portable text record: layer sizes, then row-major weight and bias
    /// blocks with 17-significant-digit floats.
    pub fn to_text(&self) -> String {
        let mut out = String::from("mlp v1\n");
        out.push_str(
            &self
                .layer_sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        );
        out.push('\n');
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            for i in 0..w.nrows() {
                let row: Vec<String> = (0..w.ncols()).map(|j| format!("{:.17e}", w[(i, j)])).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
            let bias: Vec<String> = b.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&bias.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NnError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| NnError::Parse("empty model".into()))?;
        if header.trim() != "mlp v1" {
            return Err(NnError::Parse(format!("unexpected header {header:?}")));
        }
        let sizes: Vec<usize> = lines
            .next()
            .ok_or_else(|| NnError::Parse("missing layer sizes".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| NnError::Parse(e.to_string())))
            .collect::<Result<_, _>>()?;
        let mut params = MlpParams::zeros(&sizes)?;
        for (w, b) in params.weights.iter_mut().zip(params.biases.iter_mut()) {
            for i in 0..w.nrows() {
                let line = lines
                    .next()
                    .ok_or_else(|| NnError::Parse("truncated weights".into()))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| NnError::Parse(e.to_string())))
                    .collect::<Result<_, _>>()?;
                if vals.len() != w.ncols() {
                    return Err(NnError::Parse("weight row length mismatch".into()));
                }
                for (j, v) in vals.iter().enumerate() {
                    w[(i, j)] = *v;
                }
            }
            let line = lines
                .next()
                .ok_or_else(|| NnError::Parse("truncated biases".into()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| NnError::Parse(e.to_string())))
                .collect::<Result<_, _>>()?;
            if vals.len() != b.len() {
                return Err(NnError::Parse("bias length mismatch".into()));
            }
            for (j, v) in vals.iter().enumerate() {
                b[j] = *v;
            }
        }
        Ok(params)
    }
}

/// Parameter-shaped gradient container.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Mean squared error over the batch and its reverse-mode gradient.
/// The ReLU subgradient at exactly 0 is taken as 0.
pub fn loss_and_gradient(params: &MlpParams, batch: &[Sample]) -> Result<(f64, MlpGrads), NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let layers = params.weights.len();
    let mut grads = MlpGrads {
        weights: params
            .weights
            .iter()
            .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
            .collect(),
        biases: params.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
    };
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for sample in batch {
        let (activations, output) = params.forward_cached(&sample.x);
        let err = &output - &sample.u;
        loss += err.norm_squared();
        // d(loss)/d(output) for this sample = 2 err / n.
        let mut delta = err * (2.0 / n);
        for l in (0..layers).rev() {
            let a_prev = &activations[l];
            grads.weights[l] += &delta * a_prev.transpose();
            grads.biases[l] += &delta;
            if l > 0 {
                let mut back = params.weights[l].transpose() * &delta;
                // Gate by ReLU activity of the previous layer output.
                for (v, act) in back.iter_mut().zip(activations[l].iter()) {
                    if *act <= 0.0 {
                        *v = 0.0;
                    }
                }
                delta = back;
            }
        }
    }
    Ok((loss / n, grads))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// None means full batch.
    pub batch: Option<usize>,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 1000,
            batch: None,
            seed: 0,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: MlpParams,
    pub loss_history: Vec<f64>,
    pub validation_mse: Option<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
    t: usize,
}

impl AdamState {
    fn new(params: &MlpParams) -> Self {
        Self {
            m_w: params
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            v_w: params
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            m_b: params.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            v_b: params.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for l in 0..params.weights.len() {
            self.m_w[l] = &self.m_w[l] * ADAM_BETA1 + &grads.weights[l] * (1.0 - ADAM_BETA1);
            self.v_w[l] =
                &self.v_w[l] * ADAM_BETA2 + grads.weights[l].map(|g| g * g) * (1.0 - ADAM_BETA2);
            let update = self.m_w[l].zip_map(&self.v_w[l], |m, v| {
                lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS)
            });
            params.weights[l] -= update;
            self.m_b[l] = &self.m_b[l] * ADAM_BETA1 + &grads.biases[l] * (1.0 - ADAM_BETA1);
            self.v_b[l] =
                &self.v_b[l] * ADAM_BETA2 + grads.biases[l].map(|g| g * g) * (1.0 - ADAM_BETA2);
            let update = self.m_b[l].zip_map(&self.v_b[l], |m, v| {
                lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS)
            });
            params.biases[l] -= update;
        }
    }
}

/// Trains an MLP of the given architecture on the dataset. A seeded
/// validation split is held out for the reported generalization MSE;
/// training uses the remainder.
pub fn train(
    dataset: &[Sample],
    layer_sizes: &[usize],
    config: &TrainConfig,
) -> Result<TrainResult, NnError> {
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if config.learning_rate <= 0.0 {
        return Err(NnError::BadConfig("learning_rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(NnError::BadConfig(
            "validation_fraction must lie in [0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    // Fisher-Yates with the seeded stream.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((dataset.len() as f64) * config.validation_fraction).floor() as usize;
    let val_idx = &order[..n_val];
    let train_idx = &order[n_val..];
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    if train_set.is_empty() {
        return Err(NnError::BadConfig(
            "validation split leaves no training data".into(),
        ));
    }

    let mut params = MlpParams::init(layer_sizes, config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut loss_history = Vec::with_capacity(config.epochs);
    let batch_size = config.batch.unwrap_or(train_set.len()).min(train_set.len());

    for epoch in 0..config.epochs {
        let epoch_loss = if batch_size >= train_set.len() {
            let (loss, grads) = loss_and_gradient(&params, &train_set)?;
            adam.step(&mut params, &grads, config.learning_rate);
            loss
        } else {
            // Deterministic per-epoch shuffle from the same stream.
            let mut idx: Vec<usize> = (0..train_set.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            let mut acc = 0.0;
            let mut count = 0usize;
            for chunk in idx.chunks(batch_size) {
                let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
                let (loss, grads) = loss_and_gradient(&params, &batch)?;
                adam.step(&mut params, &grads, config.learning_rate);
                acc += loss * batch.len() as f64;
                count += batch.len();
            }
            acc / count as f64
        };
        if !epoch_loss.is_finite() {
            return Err(NnError::Diverged(epoch));
        }
        loss_history.push(epoch_loss);
    }

    let validation_mse = if val_set.is_empty() {
        None
    } else {
        let mut acc = 0.0;
        for s in &val_set {
            let out = params.forward(&s.x)?;
            acc += (out - &s.u).norm_squared();
        }
        Some(acc / val_set.len() as f64)
    };

    Ok(TrainResult {
        params,
        loss_history,
        validation_mse,
    })
}

/// Dual-mode controller: exact linear feedback inside the maximal
/// admissible set, network output elsewhere.
#[derive(Debug, Clone)]
pub struct DualModeController {
    pub gain: DMatrix<f64>,
    pub sigma_inf: HPolytope,
    pub mlp: MlpParams,
    pub boundary_tol: f64,
}

impl DualModeController {
    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, NnError> {
        let inside = self
            .sigma_inf
            .contains(x, self.boundary_tol)
            .map_err(|e| NnError::DimensionMismatch(e.to_string()))?;
        if inside {
            Ok(&self.gain * x)
        } else {
            self.mlp.forward(x)
        }
    }
}

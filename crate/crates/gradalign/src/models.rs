//! The base predictor family: linear regressors and MLP binary classifiers,
//! with their paired losses.

use crate::autodiff::{evaluate, evaluate_output, CompRecord, GraphBuilder};
use crate::environments::EnvironmentBatch;
use crate::error::{GradError, Result};
use crate::params::{ParamLayout, ParamVector};
use crate::tensor::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegressor,
    MlpBinaryClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Elu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub final_bias: bool,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_activation() -> Activation {
    Activation::Elu
}

impl ModelSpec {
    pub fn linear(input_dim: usize, init_seed: u64) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::LinearRegressor,
            input_dim,
            hidden_layers: vec![],
            activation: Activation::Elu,
            batch_norm: false,
            final_bias: false,
            init_seed,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], batch_norm: bool, init_seed: u64) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::MlpBinaryClassifier,
            input_dim,
            hidden_layers: hidden.to_vec(),
            activation: Activation::Elu,
            batch_norm,
            final_bias: false,
            init_seed,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.kind {
            ModelKind::LinearRegressor => LossKind::SquaredError,
            ModelKind::MlpBinaryClassifier => LossKind::BinaryCrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(GradError::Config("input_dim must be positive".into()));
        }
        match self.kind {
            ModelKind::LinearRegressor => {
                if !self.hidden_layers.is_empty() {
                    return Err(GradError::Config(
                        "linear-regressor takes no hidden layers".into(),
                    ));
                }
                if self.batch_norm {
                    return Err(GradError::Config("linear-regressor takes no batch norm".into()));
                }
            }
            ModelKind::MlpBinaryClassifier => {
                if self.hidden_layers.is_empty() {
                    return Err(GradError::Config(
                        "mlp-binary-classifier needs at least one hidden layer".into(),
                    ));
                }
                if self.final_bias {
                    return Err(GradError::Config(
                        "the sigmoid head carries no bias term".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Builds the computation record for a full batch. Inputs: 0 = X [n,d],
/// 1 = Y [n,1]. The primary output is the mean loss; "pred", and for
/// classifiers "logits" and "irm_penalty", are named outputs.
pub fn build_model(spec: &ModelSpec) -> Result<(CompRecord, ParamVector)> {
    spec.validate()?;
    let mut layout = ParamLayout::new();
    let mut g = GraphBuilder::new();
    let x = g.input();
    let y = g.input();

    let record = match spec.kind {
        ModelKind::LinearRegressor => {
            let w_range = layout.push("w", &[spec.input_dim, 1]);
            let w = g.param(w_range, &[spec.input_dim, 1]);
            let pred = g.matmul(x, false, w, false);
            let loss = g.squared_error_mean(pred, y);
            g.name("pred", pred);
            g.name("loss", loss);
            g.finish(loss)
        }
        ModelKind::MlpBinaryClassifier => {
            let mut h = x;
            let mut in_dim = spec.input_dim;
            for (i, &width) in spec.hidden_layers.iter().enumerate() {
                let w_range = layout.push(&format!("w{i}"), &[in_dim, width]);
                let w = g.param(w_range, &[in_dim, width]);
                let mut z = g.matmul(h, false, w, false);
                if spec.batch_norm {
                    // The batch-norm shift absorbs the bias role.
                    let sc_range = layout.push(&format!("bn_scale{i}"), &[width]);
                    let sh_range = layout.push(&format!("bn_shift{i}"), &[width]);
                    let sc = g.param(sc_range, &[width]);
                    let sh = g.param(sh_range, &[width]);
                    z = g.batch_norm(z, sc, sh);
                } else {
                    let b_range = layout.push(&format!("b{i}"), &[width]);
                    let b = g.param(b_range, &[width]);
                    z = g.add_row(z, b);
                }
                h = g.elu(z);
                in_dim = width;
            }
            let w_range = layout.push("w_head", &[in_dim, 1]);
            let w = g.param(w_range, &[in_dim, 1]);
            let logits = g.matmul(h, false, w, false);
            let pred = g.sigmoid(logits);
            let loss = g.bce_with_logits(logits, y);
            // IRMv1 penalty: (mean[(sigma(z) - y) * z])^2, the squared risk
            // gradient with respect to a unit scalar multiplier on the logits.
            let diff = g.sub(pred, y);
            let prod = g.mul(diff, logits);
            let m = g.mean(prod);
            let irm = g.square(m);
            g.name("logits", logits);
            g.name("pred", pred);
            g.name("loss", loss);
            g.name("irm_penalty", irm);
            g.finish(loss)
        }
    };

    let params = init_params(spec, layout);
    Ok((record, params))
}

/// Uniform ±sqrt(6/(fan_in+fan_out)) weights, zero biases, unit batch-norm
/// scales. Deterministic in init_seed.
fn init_params(spec: &ModelSpec, layout: ParamLayout) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut values = vec![0.0; layout.total_len()];
    for seg in &layout.segments {
        let slot = &mut values[seg.start..seg.start + seg.len];
        if seg.name.starts_with('w') {
            let (fan_in, fan_out) = (seg.shape[0], seg.shape[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in slot.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
        } else if seg.name.starts_with("bn_scale") {
            slot.fill(1.0);
        }
        // biases and batch-norm shifts stay zero
    }
    ParamVector::new(values, layout)
}

/// Mean loss of the model on one environment's batch.
pub fn env_loss(record: &CompRecord, params: &ParamVector, batch: &EnvironmentBatch) -> Result<f64> {
    if batch.inputs.dims2().0 == 0 {
        return Err(GradError::Config(format!("empty batch {}", batch.env_id)));
    }
    Ok(evaluate(record, params, &[&batch.inputs, &batch.targets])?.item())
}

/// Classifier predictions in [0,1] (or raw regression outputs).
pub fn predictions(record: &CompRecord, params: &ParamVector, batch: &EnvironmentBatch) -> Result<Tensor> {
    evaluate_output(record, params, &[&batch.inputs, &batch.targets], "pred")
}

/// Fraction of thresholded predictions matching binary targets; ties at
/// exactly 0.5 predict 1.
pub fn accuracy(record: &CompRecord, params: &ParamVector, batch: &EnvironmentBatch) -> Result<f64> {
    let pred = predictions(record, params, batch)?;
    let n = pred.len();
    let hits = pred
        .data
        .iter()
        .zip(&batch.targets.data)
        .filter(|(&p, &y)| (if p >= 0.5 { 1.0 } else { 0.0 }) == y)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Standalone batch normalization over batch statistics (variance epsilon
/// 1e-5, population variance). Evaluation uses the same batch statistics.
pub fn batch_norm_forward(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2();
    if n < 2 {
        return Err(GradError::Config("batch norm needs a batch of at least 2".into()));
    }
    if scale.len() != d || shift.len() != d {
        return Err(GradError::Shape("scale/shift length mismatch".into()));
    }
    let mu = x.col_mean();
    let mut out = x.clone();
    for i in 0..n {
        for j in 0..d {
            out.data[i * d + j] -= mu.data[j];
        }
    }
    let var = out.map(|v| v * v).col_mean();
    for i in 0..n {
        for j in 0..d {
            let istd = 1.0 / (var.data[j] + 1e-5).sqrt();
            out.data[i * d + j] = out.data[i * d + j] * istd * scale.data[j] + shift.data[j];
        }
    }
    Ok(out)
}

/// Population risk of the two-feature linear SEM as a function of the
/// regression weights: L(w|eps) = (1-w1-w2*eps)^2 + (1-w2*eps)^2 + w2^2.
/// Input 0 is the scalar environment parameter eps.
pub fn sem_population_loss() -> (CompRecord, ParamLayout) {
    let mut layout = ParamLayout::new();
    let w_range = layout.push("w", &[2]);
    let mut g = GraphBuilder::new();
    let eps = g.input();
    let w = g.param(w_range, &[2]);
    let w1 = g.index(w, 0);
    let w2 = g.index(w, 1);
    let w2e = g.mul(w2, eps);
    let s = g.add(w1, w2e);
    let s = g.scale(s, -1.0);
    let a = g.add_const(s, 1.0);
    let b = g.scale(w2e, -1.0);
    let b = g.add_const(b, 1.0);
    let a2 = g.square(a);
    let b2 = g.square(b);
    let w2sq = g.square(w2);
    let partial = g.add(a2, b2);
    let loss = g.add(partial, w2sq);
    g.name("loss", loss);
    (g.finish(loss), layout)
}

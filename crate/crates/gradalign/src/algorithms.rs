//! Multi-environment training: gradient-variance-penalized descent (the
//! alignment objective) plus the ERM, IRMv1, and ANDMask baselines, all on
//! full batches with a bias-corrected Adam optimizer.

use crate::autodiff::{
    gradient_of, hvp, hvp_cached, value_and_gradient, value_and_gradient_cached, CompRecord,
    GradCache, HvpMethod, DEFAULT_FD_STEP,
};
use crate::environments::{EnvironmentBatch, EnvironmentSuite};
use crate::error::{GradError, Result};
use crate::models::{accuracy, build_model, env_loss, ModelKind, ModelSpec};
use crate::params::ParamVector;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Erm,
    Iga,
    Irmv1,
    Andmask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    0.0015
}
fn default_beta2() -> f64 {
    0.9
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: default_lr(), beta1: 0.0, beta2: default_beta2(), epsilon: default_epsilon() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// The lambda multiplier on the gradient-variance (or IRMv1) penalty.
    #[serde(default)]
    pub penalty_weight: f64,
    /// Inner step alpha: the loss term is evaluated at theta - alpha*g_mean.
    #[serde(default)]
    pub inner_step: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub iterations: usize,
    /// Training is full-batch only; the penalty's variance estimate needs it.
    #[serde(default = "default_true")]
    pub full_batch: bool,
    /// ANDMask agreement threshold tau in [0,1].
    #[serde(default)]
    pub agreement_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hvp")]
    pub hvp_method: HvpMethod,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_true() -> bool {
    true
}
fn default_hvp() -> HvpMethod {
    HvpMethod::ForwardOverReverse
}
fn default_fd_step() -> f64 {
    DEFAULT_FD_STEP
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm, iterations: usize) -> TrainConfig {
        TrainConfig {
            algorithm,
            penalty_weight: 0.0,
            inner_step: 0.0,
            adam: AdamConfig::default(),
            iterations,
            full_batch: true,
            agreement_threshold: 0.0,
            seed: 0,
            hvp_method: default_hvp(),
            fd_step: default_fd_step(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.full_batch {
            return Err(GradError::Config(
                "mini-batch training is unsupported: the penalty's variance estimate is full-batch".into(),
            ));
        }
        if self.penalty_weight < 0.0 || self.inner_step < 0.0 {
            return Err(GradError::Config("penalty_weight and inner_step must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.agreement_threshold) {
            return Err(GradError::Config("agreement_threshold must be in [0,1]".into()));
        }
        if self.iterations == 0 {
            return Err(GradError::Config("iterations must be positive".into()));
        }
        if self.adam.lr <= 0.0 || self.fd_step <= 0.0 {
            return Err(GradError::Config("lr and fd_step must be positive".into()));
        }
        Ok(())
    }
}

/// Per-environment gradients with their fixed-order mean and the trace of
/// their population covariance.
#[derive(Debug, Clone)]
pub struct GradientStats {
    pub per_env: Vec<ParamVector>,
    pub mean: ParamVector,
    pub trace_variance: f64,
}

/// (1/N) sum_e ||g_e - g_mean||^2 over at least two environments.
pub fn trace_variance(grads: &[ParamVector]) -> Result<f64> {
    if grads.len() < 2 {
        return Err(GradError::Config(format!(
            "gradient variance needs at least 2 environments, got {}",
            grads.len()
        )));
    }
    if grads.iter().any(|g| g.len() != grads[0].len()) {
        return Err(GradError::Shape("per-environment gradients differ in length".into()));
    }
    let mean = ParamVector::mean(grads);
    let p = grads.iter().map(|g| g.sub(&mean).dot(&g.sub(&mean))).sum::<f64>() / grads.len() as f64;
    Ok(p)
}

/// Batch inputs for a record: two-input records take (X, Y); one-input
/// records (closed-form population losses) take only the inputs tensor.
fn feed<'a>(record: &CompRecord, batch: &'a EnvironmentBatch) -> Vec<&'a Tensor> {
    if record.input_count() == 1 {
        vec![&batch.inputs]
    } else {
        vec![&batch.inputs, &batch.targets]
    }
}

/// Per-environment losses and gradients at one parameter point.
pub fn gradient_stats(
    record: &CompRecord,
    params: &ParamVector,
    envs: &[EnvironmentBatch],
) -> Result<(Vec<f64>, GradientStats)> {
    let mut losses = Vec::with_capacity(envs.len());
    let mut per_env = Vec::with_capacity(envs.len());
    for batch in envs {
        let (loss, grad) = value_and_gradient(record, params, &feed(record, batch))?;
        losses.push(loss);
        per_env.push(grad);
    }
    let mean = ParamVector::mean(&per_env);
    let tv = if per_env.len() >= 2 { trace_variance(&per_env)? } else { 0.0 };
    Ok((losses, GradientStats { per_env, mean, trace_variance: tv }))
}

/// As `gradient_stats`, additionally retaining each environment's primal
/// sweep so the penalty's Hessian-vector products can skip the primal work.
fn gradient_stats_cached(
    record: &CompRecord,
    params: &ParamVector,
    envs: &[EnvironmentBatch],
) -> Result<(Vec<f64>, GradientStats, Vec<GradCache>)> {
    let mut losses = Vec::with_capacity(envs.len());
    let mut per_env = Vec::with_capacity(envs.len());
    let mut caches = Vec::with_capacity(envs.len());
    for batch in envs {
        let (loss, grad, cache) = value_and_gradient_cached(record, params, &feed(record, batch))?;
        losses.push(loss);
        per_env.push(grad);
        caches.push(cache);
    }
    let mean = ParamVector::mean(&per_env);
    let tv = if per_env.len() >= 2 { trace_variance(&per_env)? } else { 0.0 };
    Ok((losses, GradientStats { per_env, mean, trace_variance: tv }, caches))
}

/// The penalized objective: mean env loss (at theta - alpha*g_mean) plus
/// lambda times the gradient-variance penalty (at theta).
pub fn iga_objective(
    record: &CompRecord,
    params: &ParamVector,
    envs: &[EnvironmentBatch],
    lambda: f64,
    alpha: f64,
) -> Result<f64> {
    if lambda < 0.0 || alpha < 0.0 {
        return Err(GradError::Config("lambda and alpha must be >= 0".into()));
    }
    let (losses, stats) = gradient_stats(record, params, envs)?;
    if envs.len() < 2 {
        return Err(GradError::Config("the objective needs at least 2 environments".into()));
    }
    let mean_loss = if alpha == 0.0 {
        losses.iter().sum::<f64>() / losses.len() as f64
    } else {
        let mut shifted = params.clone();
        shifted.axpy(-alpha, &stats.mean);
        envs.iter()
            .map(|b| Ok(crate::autodiff::evaluate(record, &shifted, &feed(record, b))?.item()))
            .sum::<Result<f64>>()?
            / envs.len() as f64
    };
    Ok(mean_loss + lambda * stats.trace_variance)
}

/// Exact gradient of the variance penalty, (2/N) sum_e H_e (g_e - g_mean),
/// one Hessian-vector product per environment.
pub fn iga_penalty_gradient(
    record: &CompRecord,
    params: &ParamVector,
    envs: &[EnvironmentBatch],
    method: HvpMethod,
    fd_step: f64,
) -> Result<ParamVector> {
    if envs.len() < 2 {
        return Err(GradError::Config("the penalty needs at least 2 environments".into()));
    }
    let mut out = params.zeros_like();
    match method {
        HvpMethod::ForwardOverReverse => {
            let (_, stats, caches) = gradient_stats_cached(record, params, envs)?;
            for (cache, g) in caches.iter().zip(&stats.per_env) {
                let dev = g.sub(&stats.mean);
                let hv = hvp_cached(record, params, cache, &dev)?;
                out.axpy(2.0 / envs.len() as f64, &hv);
            }
        }
        HvpMethod::CentralFd => {
            let (_, stats) = gradient_stats(record, params, envs)?;
            for (batch, g) in envs.iter().zip(&stats.per_env) {
                let dev = g.sub(&stats.mean);
                let hv = hvp(record, params, &feed(record, batch), &dev, method, fd_step)?;
                out.axpy(2.0 / envs.len() as f64, &hv);
            }
        }
    }
    Ok(out)
}

/// Squared derivative of the environment risk with respect to a scalar
/// multiplier on the logits, at multiplier 1. Classifiers only.
pub fn irmv1_penalty(record: &CompRecord, params: &ParamVector, batch: &EnvironmentBatch) -> Result<f64> {
    if record.node("irm_penalty").is_none() {
        return Err(GradError::Config(
            "irmv1 penalty is defined for classification models only".into(),
        ));
    }
    Ok(crate::autodiff::evaluate_output(record, params, &feed(record, batch), "irm_penalty")?.item())
}

/// Mean gradient with components zeroed unless the fraction of agreeing
/// environment signs reaches tau. sign(0) counts as neither side.
pub fn andmask_step(grads: &[ParamVector], tau: f64) -> Result<ParamVector> {
    if grads.len() < 2 {
        return Err(GradError::Config("andmask needs at least 2 environments".into()));
    }
    let mut out = ParamVector::mean(grads);
    let n = grads.len() as f64;
    for i in 0..out.len() {
        let signs: f64 = grads.iter().map(|g| g.values[i].signum() * f64::from(g.values[i] != 0.0)).sum();
        if signs.abs() / n < tau {
            out.values[i] = 0.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_env_losses: Vec<f64>,
    pub train_env_accuracies: Option<Vec<f64>>,
    pub test_env_losses: Vec<f64>,
    pub test_env_accuracies: Option<Vec<f64>>,
    /// Max loss over the union of train and test environments.
    pub worst_env_error: f64,
    /// Min accuracy over the union; classifiers only.
    pub worst_env_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub iterations_run: usize,
    pub mean_loss_trace: Vec<f64>,
    pub penalty_trace: Vec<f64>,
    pub weighted_penalty_trace: Vec<f64>,
    pub final_metrics: Option<FinalMetrics>,
    pub diverged: Option<String>,
}

pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update in place. beta1 = 0 degenerates to the
/// current gradient as the first moment.
pub fn adam_step(state: &mut AdamState, params: &mut ParamVector, grad: &ParamVector, cfg: &AdamConfig) {
    assert_eq!(state.m.len(), grad.len());
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..grad.len() {
        let g = grad.values[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params.values[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

/// Full-batch training of `spec` on the suite's train environments.
/// Deterministic in (spec, suite, config); the run seed offsets the model's
/// init seed so multi-seed sweeps vary initialization only.
pub fn train(
    spec: &ModelSpec,
    suite: &EnvironmentSuite,
    config: &TrainConfig,
) -> Result<(RunResult, ParamVector)> {
    config.validate()?;
    let needs_multi_env = !matches!(config.algorithm, Algorithm::Erm);
    if needs_multi_env && suite.train.len() < 2 {
        return Err(GradError::Config(format!(
            "{:?} needs at least 2 train environments",
            config.algorithm
        )));
    }
    if suite.train.is_empty() {
        return Err(GradError::Config("suite has no train environments".into()));
    }
    let mut seeded = spec.clone();
    seeded.init_seed = spec.init_seed.wrapping_add(config.seed);
    let (record, mut params) = build_model(&seeded)?;
    if matches!(config.algorithm, Algorithm::Irmv1) && record.node("irm_penalty").is_none() {
        return Err(GradError::Config("irmv1 requires a classification model".into()));
    }

    let mut state = AdamState::new(params.len());
    let mut mean_loss_trace = Vec::with_capacity(config.iterations);
    let mut penalty_trace = Vec::with_capacity(config.iterations);
    let mut weighted_penalty_trace = Vec::with_capacity(config.iterations);
    let mut diverged = None;

    let wants_cache = matches!(config.algorithm, Algorithm::Iga)
        && config.penalty_weight > 0.0
        && matches!(config.hvp_method, HvpMethod::ForwardOverReverse);

    for iter in 0..config.iterations {
        let (losses, stats, caches) = if wants_cache {
            let (l, s, c) = gradient_stats_cached(&record, &params, &suite.train)?;
            (l, s, Some(c))
        } else {
            let (l, s) = gradient_stats(&record, &params, &suite.train)?;
            (l, s, None)
        };
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !mean_loss.is_finite()
            || !stats.trace_variance.is_finite()
            || stats.per_env.iter().any(|g| !g.all_finite())
        {
            diverged = Some(format!("non-finite loss or gradient at iteration {iter}"));
            break;
        }
        mean_loss_trace.push(mean_loss);
        penalty_trace.push(stats.trace_variance);
        weighted_penalty_trace.push(config.penalty_weight * stats.trace_variance);

        let step_grad = match config.algorithm {
            Algorithm::Erm => stats.mean,
            Algorithm::Iga => {
                // Loss-term gradient, at the inner-shifted point when
                // alpha > 0 (first order: the shift is held constant).
                let mut g = if config.inner_step > 0.0 {
                    let mut shifted = params.clone();
                    shifted.axpy(-config.inner_step, &stats.mean);
                    let (_, inner) = gradient_stats(&record, &shifted, &suite.train)?;
                    inner.mean
                } else {
                    stats.mean.clone()
                };
                if config.penalty_weight > 0.0 {
                    let mut pg = params.zeros_like();
                    for (i, (batch, ge)) in suite.train.iter().zip(&stats.per_env).enumerate() {
                        let dev = ge.sub(&stats.mean);
                        let hv = match &caches {
                            Some(caches) => hvp_cached(&record, &params, &caches[i], &dev)?,
                            None => hvp(
                                &record,
                                &params,
                                &feed(&record, batch),
                                &dev,
                                config.hvp_method,
                                config.fd_step,
                            )?,
                        };
                        pg.axpy(2.0 / suite.train.len() as f64, &hv);
                    }
                    g.axpy(config.penalty_weight, &pg);
                }
                g
            }
            Algorithm::Irmv1 => {
                let mut g = stats.mean;
                let mut pg = params.zeros_like();
                for batch in &suite.train {
                    let grad =
                        gradient_of(&record, &params, &feed(&record, batch), "irm_penalty")?;
                    pg.axpy(1.0 / suite.train.len() as f64, &grad);
                }
                g.axpy(config.penalty_weight, &pg);
                g
            }
            Algorithm::Andmask => andmask_step(&stats.per_env, config.agreement_threshold)?,
        };
        adam_step(&mut state, &mut params, &step_grad, &config.adam);
        if !params.all_finite() {
            diverged = Some(format!("non-finite parameters after iteration {iter}"));
            break;
        }
    }

    let final_metrics = if diverged.is_none() {
        Some(final_metrics(&record, &params, spec, suite)?)
    } else {
        None
    };
    let result = RunResult {
        model: spec.clone(),
        train: config.clone(),
        iterations_run: mean_loss_trace.len(),
        mean_loss_trace,
        penalty_trace,
        weighted_penalty_trace,
        final_metrics,
        diverged,
    };
    Ok((result, params))
}

fn final_metrics(
    record: &CompRecord,
    params: &ParamVector,
    spec: &ModelSpec,
    suite: &EnvironmentSuite,
) -> Result<FinalMetrics> {
    let classifier = matches!(spec.kind, ModelKind::MlpBinaryClassifier);
    let losses = |envs: &[EnvironmentBatch]| -> Result<Vec<f64>> {
        envs.iter().map(|b| env_loss(record, params, b)).collect()
    };
    let accs = |envs: &[EnvironmentBatch]| -> Result<Vec<f64>> {
        envs.iter().map(|b| accuracy(record, params, b)).collect()
    };
    let train_env_losses = losses(&suite.train)?;
    let test_env_losses = losses(&suite.test)?;
    let train_env_accuracies = classifier.then(|| accs(&suite.train)).transpose()?;
    let test_env_accuracies = classifier.then(|| accs(&suite.test)).transpose()?;
    let worst_env_error = train_env_losses
        .iter()
        .chain(&test_env_losses)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let worst_env_accuracy = train_env_accuracies.as_ref().map(|tr| {
        tr.iter()
            .chain(test_env_accuracies.iter().flatten())
            .fold(f64::INFINITY, |a, &b| a.min(b))
    });
    Ok(FinalMetrics {
        train_env_losses,
        train_env_accuracies,
        test_env_losses,
        test_env_accuracies,
        worst_env_error,
        worst_env_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate, gradient, GraphBuilder};
    use crate::environments::gen_linear_sem;
    use crate::models::sem_population_loss;
    use crate::params::ParamLayout;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn pvec(values: Vec<f64>) -> ParamVector {
        let mut layout = ParamLayout::new();
        layout.push("theta", &[values.len()]);
        ParamVector::new(values, layout)
    }

    fn scalar_batch(id: &str, v: f64) -> EnvironmentBatch {
        EnvironmentBatch {
            inputs: Tensor::scalar(v),
            targets: Tensor::scalar(0.0),
            env_params: BTreeMap::new(),
            env_id: id.into(),
            seed: 0,
        }
    }

    #[test]
    fn trace_variance_examples() {
        let g = |v: Vec<f64>| pvec(v);
        assert_eq!(
            trace_variance(&[g(vec![2.0, 0.0]), g(vec![2.0, 0.0]), g(vec![2.0, 0.0])]).unwrap(),
            0.0
        );
        assert!((trace_variance(&[g(vec![1.0]), g(vec![-1.0])]).unwrap() - 1.0).abs() < 1e-15);
        assert!(trace_variance(&[g(vec![1.0])]).is_err());
        assert!(trace_variance(&[g(vec![1.0]), g(vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn trace_variance_matches_second_moment_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grads: Vec<_> = (0..5)
            .map(|_| pvec((0..7).map(|_| rng.random_range(-3.0..3.0)).collect()))
            .collect();
        let p = trace_variance(&grads).unwrap();
        let mean = ParamVector::mean(&grads);
        let second = grads.iter().map(|g| g.dot(g)).sum::<f64>() / grads.len() as f64;
        assert!((p - (second - mean.dot(&mean))).abs() < 1e-10);
        let mut perm = grads.clone();
        perm.reverse();
        assert!((trace_variance(&perm).unwrap() - p).abs() < 1e-12);
    }

    /// Closed-form trace variance for the two-feature SEM population loss:
    /// 4 Var(eps) w2^2 + 4 E[((eps-m)(w1-2) + 2(eps^2-m2) w2)^2] over the
    /// empirical eps sample.
    fn sem_trace_variance_closed_form(w: [f64; 2], eps: &[f64]) -> f64 {
        let n = eps.len() as f64;
        let m = eps.iter().sum::<f64>() / n;
        let m2 = eps.iter().map(|e| e * e).sum::<f64>() / n;
        let var = m2 - m * m;
        let coord2 = eps
            .iter()
            .map(|e| {
                let d = (e - m) * (w[0] - 2.0) + 2.0 * (e * e - m2) * w[1];
                d * d
            })
            .sum::<f64>()
            / n;
        4.0 * var * w[1] * w[1] + 4.0 * coord2
    }

    #[test]
    fn sem_gradient_variance_matches_closed_form() {
        let (record, layout) = sem_population_loss();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = [rng.random_range(-2.0..3.0), rng.random_range(-2.0..2.0)];
            let eps: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let params = ParamVector::new(w.to_vec(), layout.clone());
            let grads: Vec<_> = eps
                .iter()
                .map(|&e| gradient(&record, &params, &[&Tensor::scalar(e)]).unwrap())
                .collect();
            let p = trace_variance(&grads).unwrap();
            let closed = sem_trace_variance_closed_form(w, &eps);
            assert!(
                (p - closed).abs() <= 1e-8 * closed.abs().max(1e-8),
                "w {w:?} eps {eps:?}: {p} vs {closed}"
            );
        }
        // the aligned point [2,0] zeroes the variance for any eps sample
        let params = ParamVector::new(vec![2.0, 0.0], layout);
        let grads: Vec<_> = [-1.0, 0.5, 2.0]
            .iter()
            .map(|&e| gradient(&record, &params, &[&Tensor::scalar(e)]).unwrap())
            .collect();
        assert!(trace_variance(&grads).unwrap() < 1e-28);
    }

    #[test]
    fn objective_reduces_to_mean_loss_and_penalizes_variance() {
        let (record, layout) = sem_population_loss();
        let envs: Vec<_> = [-1.0, 0.5, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &e)| scalar_batch(&format!("e{i}"), e))
            .collect();
        let params = ParamVector::new(vec![2.0, 0.0], layout.clone());
        // loss at [2,0] is 2 in every environment and the penalty vanishes
        for lambda in [0.0, 1.0, 1e3] {
            let v = iga_objective(&record, &params, &envs, lambda, 0.0).unwrap();
            assert!((v - 2.0).abs() < 1e-12, "lambda {lambda}: {v}");
        }
        let params = ParamVector::new(vec![0.0, 1.0], layout);
        let erm = iga_objective(&record, &params, &envs, 0.0, 0.0).unwrap();
        let mean_loss = envs
            .iter()
            .map(|b| evaluate(&record, &params, &[&b.inputs]).unwrap().item())
            .sum::<f64>()
            / 3.0;
        assert!((erm - mean_loss).abs() < 1e-14);
        let pen = iga_objective(&record, &params, &envs, 2.0, 0.0).unwrap();
        assert!(pen > erm);
    }

    #[test]
    fn penalty_gradient_matches_analytic_quadratics() {
        // per-env loss 0.5 theta' A_e theta - b_e' theta; gradient of the
        // variance penalty is (2/N) sum A_e (g_e - g_mean)
        let d = 4;
        let n_env = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layout = ParamLayout::new();
        let r = layout.push("theta", &[d, 1]);
        let mut g = GraphBuilder::new();
        let a_in = g.input();
        let b_in = g.input();
        let theta = g.param(r, &[d, 1]);
        let at = g.matmul(a_in, false, theta, false);
        let q = g.matmul(theta, true, at, false);
        let q = g.scale(q, 0.5);
        let lin = g.matmul(b_in, true, theta, false);
        let loss_m = g.sub(q, lin);
        let loss = g.sum(loss_m);
        let record = g.finish(loss);

        let envs: Vec<EnvironmentBatch> = (0..n_env)
            .map(|i| {
                // symmetric A_e = M + M'
                let m: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut a = vec![0.0; d * d];
                for r0 in 0..d {
                    for c in 0..d {
                        a[r0 * d + c] = m[r0 * d + c] + m[c * d + r0];
                    }
                }
                EnvironmentBatch {
                    inputs: Tensor::new(vec![d, d], a),
                    targets: Tensor::new(
                        vec![d, 1],
                        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    ),
                    env_params: BTreeMap::new(),
                    env_id: format!("q{i}"),
                    seed: 0,
                }
            })
            .collect();
        let params = ParamVector::new(
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            layout,
        );
        let (_, stats) = gradient_stats(&record, &params, &envs).unwrap();
        let mut analytic = params.zeros_like();
        for (batch, ge) in envs.iter().zip(&stats.per_env) {
            let dev = ge.sub(&stats.mean);
            for r0 in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += batch.inputs.data[r0 * d + c] * dev.values[c];
                }
                analytic.values[r0] += 2.0 / n_env as f64 * acc;
            }
        }
        for method in [HvpMethod::ForwardOverReverse, HvpMethod::CentralFd] {
            let pg = iga_penalty_gradient(&record, &params, &envs, method, DEFAULT_FD_STEP).unwrap();
            let rel = pg.sub(&analytic).norm() / analytic.norm();
            assert!(rel < 1e-6, "{method:?}: rel err {rel}");
        }
    }

    #[test]
    fn penalty_gradient_is_zero_for_identical_environments() {
        let (record, layout) = sem_population_loss();
        let envs = vec![scalar_batch("a", 0.7), scalar_batch("b", 0.7)];
        let params = ParamVector::new(vec![0.3, -1.1], layout);
        let pg = iga_penalty_gradient(
            &record,
            &params,
            &envs,
            HvpMethod::ForwardOverReverse,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(pg.norm() < 1e-14);
    }

    #[test]
    fn adam_first_steps_are_scale_free() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.0, beta2: 0.9, epsilon: 1e-8 };
        let mut params = pvec(vec![0.0]);
        let mut state = AdamState::new(1);
        adam_step(&mut state, &mut params, &pvec(vec![2.0]), &cfg);
        let first = params.values[0];
        assert!((first + 0.1).abs() < 1e-8, "first step {first}");
        adam_step(&mut state, &mut params, &pvec(vec![2.0]), &cfg);
        let second = params.values[0] - first;
        assert!((second - first).abs() < 1e-6, "second step {second}");
        // zero gradient leaves parameters alone
        let mut params = pvec(vec![1.0]);
        let mut state = AdamState::new(1);
        adam_step(&mut state, &mut params, &pvec(vec![0.0]), &cfg);
        assert_eq!(params.values[0], 1.0);
    }

    #[test]
    fn irmv1_penalty_examples() {
        let spec = ModelSpec::mlp(1, &[1], false, 0);
        let (record, params) = build_model(&spec).unwrap();
        let batch = EnvironmentBatch {
            inputs: Tensor::new(vec![1, 1], vec![1.0]),
            targets: Tensor::new(vec![1, 1], vec![1.0]),
            env_params: BTreeMap::new(),
            env_id: "e".into(),
            seed: 0,
        };
        // zero params: logits 0 so the penalty vanishes
        let zero = ParamVector::new(vec![0.0; 3], params.layout.clone());
        assert_eq!(irmv1_penalty(&record, &zero, &batch).unwrap(), 0.0);
        // w0=1, b0=0, head=ln 3: logit ln 3, y=1 -> ((1/4 - 1) ln 3)^2... sign
        // squared: ((sigma(ln3) - 1) * ln3)^2 = (0.25 * ln3)^2
        let mut p = params.clone();
        p.values = vec![1.0, 0.0, 3f64.ln()];
        let pen = irmv1_penalty(&record, &p, &batch).unwrap();
        let expect = (0.25 * 3f64.ln()).powi(2);
        assert!((pen - expect).abs() < 1e-12, "{pen} vs {expect}");
        // saturated correct logits make the penalty vanish
        p.values = vec![1.0, 0.0, 50.0];
        assert!(irmv1_penalty(&record, &p, &batch).unwrap() < 1e-12);
        // regression models have no logits
        let (lin_record, lin_params) = build_model(&ModelSpec::linear(1, 0)).unwrap();
        assert!(irmv1_penalty(&lin_record, &lin_params, &batch).is_err());
    }

    #[test]
    fn irm_penalty_gradient_matches_finite_differences() {
        let spec = ModelSpec::mlp(2, &[3], false, 5);
        let (record, params) = build_model(&spec).unwrap();
        let batch = EnvironmentBatch {
            inputs: Tensor::new(vec![4, 2], vec![0.3, -1.0, 0.8, 0.2, -0.5, 1.4, 0.0, -0.7]),
            targets: Tensor::new(vec![4, 1], vec![1.0, 0.0, 1.0, 0.0]),
            env_params: BTreeMap::new(),
            env_id: "e".into(),
            seed: 0,
        };
        let g = gradient_of(&record, &params, &[&batch.inputs, &batch.targets], "irm_penalty").unwrap();
        let mut fd = params.zeros_like();
        let mut probe = params.clone();
        for i in 0..params.len() {
            let orig = probe.values[i];
            for (sign, acc) in [(1.0, 1.0), (-1.0, -1.0)] {
                probe.values[i] = orig + sign * 1e-5;
                fd.values[i] += acc * irmv1_penalty(&record, &probe, &batch).unwrap() / 2e-5;
            }
            probe.values[i] = orig;
        }
        let rel = g.sub(&fd).norm() / fd.norm().max(1e-12);
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn andmask_examples() {
        let grads = [pvec(vec![1.0, 2.0]), pvec(vec![3.0, -1.0])];
        // all signs agree on component 0 only
        let m = andmask_step(&grads, 1.0).unwrap();
        assert_eq!(m.values, vec![2.0, 0.0]);
        // tau = 0 keeps the plain mean
        let m = andmask_step(&grads, 0.0).unwrap();
        assert_eq!(m.values, vec![2.0, 0.5]);
        // sign(0) counts as neither agreement nor disagreement
        let grads = [pvec(vec![1.0]), pvec(vec![0.0]), pvec(vec![1.0])];
        let m = andmask_step(&grads, 0.7).unwrap();
        assert_eq!(m.values, vec![0.0]);
        let m = andmask_step(&grads, 0.6).unwrap();
        assert!((m.values[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(andmask_step(&grads[..1], 0.5).is_err());
    }

    #[test]
    fn erm_and_zero_penalty_alignment_coincide() {
        let suite = gen_linear_sem(&[-1.0, 0.5, 2.0], 500, 3);
        let spec = ModelSpec::linear(2, 0);
        let mut cfg = TrainConfig::new(Algorithm::Erm, 100);
        cfg.adam.lr = 0.05;
        let (erm, erm_params) = train(&spec, &suite, &cfg).unwrap();
        cfg.algorithm = Algorithm::Iga;
        let (iga, iga_params) = train(&spec, &suite, &cfg).unwrap();
        assert_eq!(erm_params.values, iga_params.values);
        assert_eq!(erm.mean_loss_trace, iga.mean_loss_trace);
        // the convex full-batch run is near-monotone; endpoints must drop
        assert!(erm.mean_loss_trace.last().unwrap() < erm.mean_loss_trace.first().unwrap());
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let suite = gen_linear_sem(&[-1.0, 0.5, 2.0], 200, 3);
        let spec = ModelSpec::linear(2, 1);
        let mut cfg = TrainConfig::new(Algorithm::Iga, 30);
        cfg.penalty_weight = 10.0;
        cfg.adam.lr = 0.05;
        cfg.seed = 4;
        let (a, pa) = train(&spec, &suite, &cfg).unwrap();
        let (b, pb) = train(&spec, &suite, &cfg).unwrap();
        assert_eq!(pa.values, pb.values);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        cfg.seed = 5;
        let (_, pc) = train(&spec, &suite, &cfg).unwrap();
        assert_ne!(pa.values, pc.values);
    }

    #[test]
    fn divergent_runs_abort_with_a_diagnostic() {
        let suite = gen_linear_sem(&[-1.0, 2.0], 100, 3);
        let spec = ModelSpec::linear(2, 0);
        let mut cfg = TrainConfig::new(Algorithm::Iga, 200);
        // an absurd learning rate overflows the squared-error loss
        cfg.penalty_weight = 10.0;
        cfg.adam.lr = 1e200;
        let (res, _) = train(&spec, &suite, &cfg).unwrap();
        assert!(res.diverged.is_some());
        assert!(res.final_metrics.is_none());
        assert!(res.iterations_run < cfg.iterations);
        assert!(res.mean_loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::new(Algorithm::Erm, 10);
        cfg.full_batch = false;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(Algorithm::Iga, 10);
        cfg.penalty_weight = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(Algorithm::Andmask, 10);
        cfg.agreement_threshold = 1.5;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig::new(Algorithm::Erm, 0);
        assert!(cfg.validate().is_err());
        // config json with unknown keys fails closed
        let bad = r#"{"algorithm":"erm","iterations":5,"learning_rate":0.1}"#;
        assert!(serde_json::from_str::<TrainConfig>(bad).is_err());
        let good = r#"{"algorithm":"iga","iterations":5,"penalty_weight":100.0}"#;
        let cfg: TrainConfig = serde_json::from_str(good).unwrap();
        assert_eq!(cfg.adam.lr, 0.0015);
        assert_eq!(cfg.adam.beta2, 0.9);
        assert!(cfg.full_batch);
    }

    #[test]
    fn alignment_training_recovers_the_invariant_sem_solution() {
        // sampled small-scale version of the closed-form construction
        let suite = gen_linear_sem(&[-1.0, 0.5, 2.0], 2000, 7);
        let spec = ModelSpec::linear(2, 0);
        let mut cfg = TrainConfig::new(Algorithm::Iga, 800);
        cfg.penalty_weight = 1e3;
        cfg.adam.lr = 0.01;
        let (_, params) = train(&spec, &suite, &cfg).unwrap();
        let w = params.segment_values("w");
        assert!((w[0] - 2.0).abs() < 0.05 && w[1].abs() < 0.05, "w {w:?}");

        let mut erm_cfg = TrainConfig::new(Algorithm::Erm, 800);
        erm_cfg.adam.lr = 0.01;
        let (_, erm_params) = train(&spec, &suite, &erm_cfg).unwrap();
        let we = erm_params.segment_values("w");
        assert!(we[1].abs() > 0.05, "erm exploits the spurious feature: {we:?}");
    }

    #[test]
    fn inner_step_shifts_the_loss_gradient() {
        let (record, layout) = sem_population_loss();
        let envs = vec![scalar_batch("a", -1.0), scalar_batch("b", 2.0)];
        let params = ParamVector::new(vec![1.0, 0.5], layout);
        // alpha > 0 objective equals mean loss at theta - alpha*g_mean plus penalty
        let (_, stats) = gradient_stats(&record, &params, &envs).unwrap();
        let alpha = 0.1;
        let mut shifted = params.clone();
        shifted.axpy(-alpha, &stats.mean);
        let expect = envs
            .iter()
            .map(|b| evaluate(&record, &shifted, &[&b.inputs]).unwrap().item())
            .sum::<f64>()
            / 2.0
            + 3.0 * stats.trace_variance;
        let got = iga_objective(&record, &params, &envs, 3.0, alpha).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences_of_the_penalty() {
        let (record, layout) = sem_population_loss();
        let envs = vec![scalar_batch("a", -1.0), scalar_batch("b", 0.5), scalar_batch("c", 2.0)];
        let params = ParamVector::new(vec![0.8, -0.3], layout);
        let pg = iga_penalty_gradient(
            &record,
            &params,
            &envs,
            HvpMethod::ForwardOverReverse,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        let h = 1e-5;
        let mut fd = params.zeros_like();
        let mut probe = params.clone();
        for i in 0..2 {
            let orig = probe.values[i];
            let mut at = |v: f64| {
                probe.values[i] = v;
                let grads: Vec<_> = envs
                    .iter()
                    .map(|b| gradient(&record, &probe, &[&b.inputs]).unwrap())
                    .collect();
                trace_variance(&grads).unwrap()
            };
            let fp = at(orig + h);
            let fm = at(orig - h);
            probe.values[i] = orig;
            fd.values[i] = (fp - fm) / (2.0 * h);
        }
        let rel = pg.sub(&fd).norm() / fd.norm();
        assert!(rel < 1e-6, "rel err {rel}");
    }
}

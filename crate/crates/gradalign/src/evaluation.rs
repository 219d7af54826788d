//! Worst-environment metrics, affine-mixture loss bounds, lambda sweeps,
//! and the small-step KL alignment check for the gradient-variance penalty.

use crate::algorithms::{gradient_stats, train, trace_variance, TrainConfig};
use crate::autodiff::{evaluate_output, CompRecord};
use crate::environments::{EnvironmentBatch, EnvironmentSuite};
use crate::error::{GradError, Result};
use crate::models::{accuracy, env_loss, ModelSpec};
use crate::params::ParamVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Error,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvScope {
    /// Train and test environments together.
    Union,
    TestOnly,
}

/// Worst-case metric over the chosen environments: minimum accuracy or
/// maximum error. Error means 1 - accuracy for classifiers and the mean
/// loss for regressors.
pub fn worst_env_metric(
    record: &CompRecord,
    params: &ParamVector,
    suite: &EnvironmentSuite,
    metric: Metric,
    scope: EnvScope,
) -> Result<f64> {
    let envs: Vec<&EnvironmentBatch> = match scope {
        EnvScope::Union => suite.union().collect(),
        EnvScope::TestOnly => suite.test.iter().collect(),
    };
    if envs.is_empty() {
        return Err(GradError::Config("no environments in scope".into()));
    }
    let classifier = record.node("logits").is_some();
    let mut worst = match metric {
        Metric::Error => f64::NEG_INFINITY,
        Metric::Accuracy => f64::INFINITY,
    };
    for env in envs {
        let v = match (metric, classifier) {
            (Metric::Accuracy, true) => accuracy(record, params, env)?,
            (Metric::Accuracy, false) => {
                return Err(GradError::Config(
                    "accuracy metric is defined for classifiers only".into(),
                ))
            }
            (Metric::Error, true) => 1.0 - accuracy(record, params, env)?,
            (Metric::Error, false) => env_loss(record, params, env)?,
        };
        worst = match metric {
            Metric::Error => worst.max(v),
            Metric::Accuracy => worst.min(v),
        };
    }
    Ok(worst)
}

/// Exact supremum of sum_e alpha_e L_e over the affine mixtures
/// {alpha_e > -eta, sum alpha_e = 1}: mean + (1 + n*eta)(max - mean).
pub fn mixture_loss_sup(per_env_losses: &[f64], eta: f64) -> Result<f64> {
    if per_env_losses.is_empty() {
        return Err(GradError::Config("no per-environment losses".into()));
    }
    if eta < 0.0 || per_env_losses.iter().any(|l| !l.is_finite()) {
        return Err(GradError::Config("eta must be >= 0 and losses finite".into()));
    }
    let n = per_env_losses.len() as f64;
    let mean = per_env_losses.iter().sum::<f64>() / n;
    let max = per_env_losses.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    Ok(mean + (1.0 + n * eta) * (max - mean))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub eta: f64,
    pub lambda: f64,
    pub per_env_losses: Vec<f64>,
    pub mean_loss: f64,
    /// Gradient-variance penalty at the evaluated parameters.
    pub penalty: f64,
    pub closed_form_sup: f64,
    /// Brute-force maximum over sampled mixture weights; never exceeds the
    /// closed form by more than 1e-9.
    pub sampled_sup: f64,
    /// Largest |weighted per-sample sum - sum alpha_e L_e| over the probes.
    pub mixture_identity_gap: f64,
    /// closed_form_sup minus (mean_loss + lambda * penalty).
    pub slack: f64,
}

impl BoundReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "eta,lambda,mean_loss,penalty,closed_form_sup,sampled_sup,mixture_identity_gap,slack\n",
        );
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            self.eta,
            self.lambda,
            self.mean_loss,
            self.penalty,
            self.closed_form_sup,
            self.sampled_sup,
            self.mixture_identity_gap,
            self.slack
        ));
        out
    }
}

/// Per-sample losses of one environment, from the record's named outputs.
/// Their plain mean is the environment loss; weighted resummation across
/// environments realizes any mixture loss exactly.
pub fn per_sample_losses(
    record: &CompRecord,
    params: &ParamVector,
    batch: &EnvironmentBatch,
) -> Result<Vec<f64>> {
    if record.node("logits").is_some() {
        let z = evaluate_output(record, params, &[&batch.inputs, &batch.targets], "logits")?;
        Ok(z.data
            .iter()
            .zip(&batch.targets.data)
            .map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z)
            .collect())
    } else {
        let pred = evaluate_output(record, params, &[&batch.inputs, &batch.targets], "pred")?;
        Ok(pred
            .data
            .iter()
            .zip(&batch.targets.data)
            .map(|(&p, &y)| (p - y) * (p - y))
            .collect())
    }
}

/// Uniform sample from {alpha: alpha_e > -eta, sum alpha = 1} by mapping a
/// uniform simplex draw beta to (1 + n*eta) * beta - eta.
fn sample_mixture(n: usize, eta: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let exps: Vec<f64> = (0..n).map(|_| -rng.random_range(0.0f64..1.0).max(1e-300).ln()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (1.0 + n as f64 * eta) * e / total - eta).collect()
}

/// Verifies the affine-mixture loss identities on the train environments
/// and reports the closed-form supremum against the penalized mean loss.
pub fn bound_check(
    record: &CompRecord,
    params: &ParamVector,
    suite: &EnvironmentSuite,
    eta: f64,
    lambda: f64,
    n_samples: usize,
) -> Result<BoundReport> {
    let envs = &suite.train;
    if envs.len() < 2 {
        return Err(GradError::Config("bound check needs at least 2 environments".into()));
    }
    let n = envs.len();
    let samples: Vec<Vec<f64>> = envs
        .iter()
        .map(|b| per_sample_losses(record, params, b))
        .collect::<Result<_>>()?;
    let per_env_losses: Vec<f64> =
        samples.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    let mean_loss = per_env_losses.iter().sum::<f64>() / n as f64;
    let closed_form_sup = mixture_loss_sup(&per_env_losses, eta)?;

    // Probe mixtures: the Delta_eta vertices (which attain the sup), then
    // uniform samples. The weighted per-sample resummation must agree with
    // the weighted combination of environment means.
    let mut rng = ChaCha8Rng::seed_from_u64(0x616c7068);
    let mut sampled_sup = f64::NEG_INFINITY;
    let mut identity_gap: f64 = 0.0;
    let scale = 1.0 + n as f64 * eta;
    for k in 0..n_samples.max(n) {
        let alpha = if k < n {
            (0..n).map(|e| if e == k { scale - eta } else { -eta }).collect()
        } else {
            sample_mixture(n, eta, &mut rng)
        };
        let combined: f64 = alpha.iter().zip(&per_env_losses).map(|(a, l)| a * l).sum();
        sampled_sup = sampled_sup.max(combined);
        // re-derive the same mixture loss sample-by-sample on a few probes
        if k < n + 8 {
            let concatenated: f64 = alpha
                .iter()
                .zip(&samples)
                .flat_map(|(a, s)| s.iter().map(move |l| a * l / s.len() as f64))
                .sum();
            identity_gap = identity_gap.max((concatenated - combined).abs());
        }
    }

    let (_, stats) = gradient_stats(record, params, envs)?;
    Ok(BoundReport {
        eta,
        lambda,
        per_env_losses,
        mean_loss,
        penalty: stats.trace_variance,
        closed_form_sup,
        sampled_sup,
        mixture_identity_gap: identity_gap,
        slack: closed_form_sup - (mean_loss + lambda * stats.trace_variance),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub worst_env_accuracy: Option<f64>,
    pub worst_env_error: f64,
    pub final_penalty: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda: f64,
    /// Worst-env accuracy for classifiers, worst-env error for regressors.
    pub metric_mean: f64,
    pub metric_std: Option<f64>,
    pub penalty_mean: f64,
    pub n_ok: usize,
    pub n_diverged: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,seed,worst_env_accuracy,worst_env_error,final_penalty,diverged\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.lambda,
                r.seed,
                r.worst_env_accuracy.map_or(String::new(), |v| v.to_string()),
                r.worst_env_error,
                r.final_penalty,
                r.diverged
            ));
        }
        out
    }
}

/// Trains one model per (lambda, seed) and aggregates worst-environment
/// metrics. Diverged runs are recorded, not fatal.
pub fn lambda_sweep(
    spec: &ModelSpec,
    suite: &EnvironmentSuite,
    base: &TrainConfig,
    lambda_grid: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    if lambda_grid.is_empty() || seeds.is_empty() {
        return Err(GradError::Config("empty lambda grid or seed list".into()));
    }
    let mut grid = lambda_grid.to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &lambda in &grid {
        let mut metrics = Vec::new();
        let mut penalties = Vec::new();
        let mut n_diverged = 0;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.penalty_weight = lambda;
            cfg.seed = seed;
            let (result, _) = train(spec, suite, &cfg)?;
            match (&result.final_metrics, &result.diverged) {
                (Some(fm), None) => {
                    rows.push(SweepRow {
                        lambda,
                        seed,
                        worst_env_accuracy: fm.worst_env_accuracy,
                        worst_env_error: fm.worst_env_error,
                        final_penalty: *result.penalty_trace.last().unwrap(),
                        diverged: false,
                    });
                    metrics.push(fm.worst_env_accuracy.unwrap_or(fm.worst_env_error));
                    penalties.push(*result.penalty_trace.last().unwrap());
                }
                _ => {
                    n_diverged += 1;
                    rows.push(SweepRow {
                        lambda,
                        seed,
                        worst_env_accuracy: None,
                        worst_env_error: f64::INFINITY,
                        final_penalty: result.penalty_trace.last().copied().unwrap_or(f64::INFINITY),
                        diverged: true,
                    });
                }
            }
        }
        let n_ok = metrics.len();
        let mean = metrics.iter().sum::<f64>() / n_ok.max(1) as f64;
        let std = (n_ok >= 2).then(|| {
            (metrics.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n_ok as f64).sqrt()
        });
        summary.push(SweepSummary {
            lambda,
            metric_mean: mean,
            metric_std: std,
            penalty_mean: penalties.iter().sum::<f64>() / n_ok.max(1) as f64,
            n_ok,
            n_diverged,
        });
    }
    Ok(SweepResult { rows, summary })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlAlignmentReport {
    pub alphas: Vec<f64>,
    /// Mean inter-environment divergence divided by alpha * penalty.
    pub ratios: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Log-log slope of |divergence - alpha*penalty| against alpha.
    pub residual_slope: f64,
}

/// First-order alignment check: the mean gap between each environment's
/// loss after the pooled gradient step and after its own gradient step
/// equals alpha times the gradient-variance penalty, up to O(alpha^2).
pub fn kl_alignment_check(
    record: &CompRecord,
    params: &ParamVector,
    envs: &[EnvironmentBatch],
    alphas: &[f64],
) -> Result<KlAlignmentReport> {
    if alphas.len() < 2 || alphas.iter().any(|&a| a <= 0.0) {
        return Err(GradError::Config("need at least two positive alphas".into()));
    }
    let (_, stats) = gradient_stats(record, params, envs)?;
    let p = trace_variance(&stats.per_env)?;
    let mut ratios = Vec::new();
    let mut residuals = Vec::new();
    for &alpha in alphas {
        let mut pooled = params.clone();
        pooled.axpy(-alpha, &stats.mean);
        let mut divergence = 0.0;
        for (batch, ge) in envs.iter().zip(&stats.per_env) {
            let mut own = params.clone();
            own.axpy(-alpha, ge);
            let l_pooled = env_loss(record, &pooled, batch)?;
            let l_own = env_loss(record, &own, batch)?;
            divergence += (l_pooled - l_own) / envs.len() as f64;
        }
        ratios.push(divergence / (alpha * p));
        residuals.push((divergence - alpha * p).abs());
    }
    let xs: Vec<f64> = alphas.iter().map(|a| a.ln()).collect();
    let ys: Vec<f64> = residuals.iter().map(|r| r.max(1e-300).ln()).collect();
    Ok(KlAlignmentReport {
        alphas: alphas.to_vec(),
        ratios,
        residuals,
        residual_slope: slope(&xs, &ys),
    })
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::Algorithm;
    use crate::environments::{gen_linear_sem, gen_synthetic_invariance, SyntheticKind};
    use crate::models::build_model;

    #[test]
    fn mixture_sup_examples() {
        assert_eq!(mixture_loss_sup(&[1.0, 2.0], 0.0).unwrap(), 2.0);
        assert!((mixture_loss_sup(&[1.0, 2.0], 0.5).unwrap() - 2.5).abs() < 1e-15);
        assert!(mixture_loss_sup(&[], 0.0).is_err());
        assert!(mixture_loss_sup(&[1.0], -0.1).is_err());
        assert!(mixture_loss_sup(&[f64::NAN], 0.0).is_err());
    }

    #[test]
    fn mixture_sup_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..6usize);
            let losses: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let max = losses.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s0 = mixture_loss_sup(&losses, 0.0).unwrap();
            assert!((s0 - max).abs() < 1e-12);
            // monotone non-decreasing in eta
            let mut last = s0;
            for eta in [0.1, 0.2, 0.5, 1.0] {
                let s = mixture_loss_sup(&losses, eta).unwrap();
                assert!(s >= last - 1e-12);
                last = s;
            }
        }
    }

    #[test]
    fn worst_env_metric_on_a_split_classifier() {
        // classifier trained a little on the synthetic suite: test envs
        // reverse the spurious feature, so accuracies differ per env
        let suite = gen_synthetic_invariance(SyntheticKind::ClassificationInvSpu, 2, 2, 2, 400, false, 3);
        let spec = ModelSpec::mlp(4, &[8], false, 0);
        let mut cfg = TrainConfig::new(Algorithm::Erm, 60);
        cfg.adam.lr = 0.01;
        let (result, params) = train(&spec, &suite, &cfg).unwrap();
        let (record, _) = build_model(&spec).unwrap();
        let fm = result.final_metrics.unwrap();
        let acc_union = worst_env_metric(&record, &params, &suite, Metric::Accuracy, EnvScope::Union).unwrap();
        let err_union = worst_env_metric(&record, &params, &suite, Metric::Error, EnvScope::Union).unwrap();
        let all: Vec<f64> = fm
            .train_env_accuracies
            .iter()
            .flatten()
            .chain(fm.test_env_accuracies.iter().flatten())
            .copied()
            .collect();
        let expect = all.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        assert!((acc_union - expect).abs() < 1e-15);
        assert!((err_union - (1.0 - expect)).abs() < 1e-15);
        let acc_test = worst_env_metric(&record, &params, &suite, Metric::Accuracy, EnvScope::TestOnly).unwrap();
        assert!(acc_test >= acc_union);
    }

    #[test]
    fn accuracy_metric_rejects_regressors() {
        let suite = gen_linear_sem(&[0.5, 1.0], 50, 1);
        let spec = ModelSpec::linear(2, 0);
        let (record, params) = build_model(&spec).unwrap();
        assert!(worst_env_metric(&record, &params, &suite, Metric::Accuracy, EnvScope::Union).is_err());
        let err = worst_env_metric(&record, &params, &suite, Metric::Error, EnvScope::Union).unwrap();
        assert!(err.is_finite());
        assert!(worst_env_metric(&record, &params, &suite, Metric::Error, EnvScope::TestOnly).is_err());
    }

    #[test]
    fn bound_report_identities() {
        let suite = gen_linear_sem(&[-1.0, 0.5, 2.0], 300, 5);
        let spec = ModelSpec::linear(2, 0);
        let (record, params) = build_model(&spec).unwrap();
        for eta in [0.0, 0.1, 0.5] {
            let report = bound_check(&record, &params, &suite, eta, 10.0, 20_000).unwrap();
            assert!(report.mixture_identity_gap < 1e-12, "gap {}", report.mixture_identity_gap);
            assert!(report.sampled_sup <= report.closed_form_sup + 1e-9);
            // the vertex probes attain the sup exactly
            assert!(report.closed_form_sup - report.sampled_sup < 1e-9);
            if eta == 0.0 {
                let max = report.per_env_losses.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                assert!((report.closed_form_sup - max).abs() < 1e-12);
            }
            let expect_slack = report.closed_form_sup - (report.mean_loss + 10.0 * report.penalty);
            assert!((report.slack - expect_slack).abs() < 1e-12);
        }
    }

    #[test]
    fn per_sample_losses_average_to_the_env_loss() {
        let suite = gen_synthetic_invariance(SyntheticKind::ClassificationInvSpu, 2, 2, 2, 64, false, 8);
        let spec = ModelSpec::mlp(4, &[6], true, 2);
        let (record, params) = build_model(&spec).unwrap();
        for env in suite.union() {
            let samples = per_sample_losses(&record, &params, env).unwrap();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let loss = env_loss(&record, &params, env).unwrap();
            assert!((mean - loss).abs() < 1e-12, "{} vs {loss}", mean);
        }
    }

    #[test]
    fn lambda_zero_sweep_reproduces_erm() {
        let suite = gen_linear_sem(&[-1.0, 0.5, 2.0], 300, 2);
        let spec = ModelSpec::linear(2, 0);
        let mut base = TrainConfig::new(Algorithm::Iga, 80);
        base.adam.lr = 0.02;
        let sweep = lambda_sweep(&spec, &suite, &base, &[0.0], &[1, 2]).unwrap();
        let mut erm_cfg = TrainConfig::new(Algorithm::Erm, 80);
        erm_cfg.adam.lr = 0.02;
        erm_cfg.seed = 1;
        let (erm, _) = train(&spec, &suite, &erm_cfg).unwrap();
        assert_eq!(
            sweep.rows[0].worst_env_error,
            erm.final_metrics.unwrap().worst_env_error
        );
        assert_eq!(sweep.summary.len(), 1);
        assert!(sweep.summary[0].metric_std.is_some());
    }

    #[test]
    fn penalty_decreases_along_the_sweep() {
        let suite = gen_linear_sem(&[-1.0, 0.5, 2.0], 500, 4);
        let spec = ModelSpec::linear(2, 0);
        let mut base = TrainConfig::new(Algorithm::Iga, 400);
        base.adam.lr = 0.02;
        let sweep = lambda_sweep(&spec, &suite, &base, &[0.0, 10.0, 1000.0], &[1]).unwrap();
        let penalties: Vec<f64> = sweep.summary.iter().map(|s| s.penalty_mean).collect();
        assert!(penalties[1] < penalties[0] && penalties[2] < penalties[1], "{penalties:?}");
        // grid comes out sorted even if passed shuffled
        let shuffled = lambda_sweep(&spec, &suite, &base, &[1000.0, 0.0, 10.0], &[1]).unwrap();
        let lambdas: Vec<f64> = shuffled.summary.iter().map(|s| s.lambda).collect();
        assert_eq!(lambdas, vec![0.0, 10.0, 1000.0]);
    }

    #[test]
    fn sweep_csv_has_one_row_per_run() {
        let suite = gen_linear_sem(&[-1.0, 2.0], 100, 6);
        let spec = ModelSpec::linear(2, 0);
        let base = TrainConfig::new(Algorithm::Iga, 10);
        let sweep = lambda_sweep(&spec, &suite, &base, &[0.0, 1.0], &[1, 2, 3]).unwrap();
        let csv = sweep.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.starts_with("lambda,seed,"));
    }

    #[test]
    fn kl_alignment_on_a_logistic_problem() {
        let suite = gen_synthetic_invariance(SyntheticKind::ClassificationInvSpu, 3, 2, 2, 500, false, 11);
        let spec = ModelSpec::mlp(5, &[4], false, 1);
        let (record, params) = build_model(&spec).unwrap();
        let alphas = [1e-1, 1e-2, 1e-3, 1e-4];
        let report = kl_alignment_check(&record, &params, &suite.train, &alphas).unwrap();
        let r = report.ratios[2];
        assert!((r - 1.0).abs() < 0.05, "ratio at 1e-3: {r}");
        assert!(
            (report.residual_slope - 2.0).abs() < 0.3,
            "slope {}",
            report.residual_slope
        );
    }

    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
}

//! Synthetic invariance benchmark: targets depend on an invariant block of
//! coordinates through a fixed rule, while a spurious block tracks the
//! target with an environment-dependent strength that reverses sign between
//! train and test. Optionally all coordinates are mixed by one shared
//! random orthogonal matrix.

use super::{env_rng, normal, EnvironmentBatch, EnvironmentSuite, SuiteOracle, TEST_STREAM_BASE};
use crate::tensor::Tensor;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    RegressionInvSpu,
    ClassificationInvSpu,
}

/// Noise standard deviation of the regression target given the invariant
/// block; the oracle's irreducible squared error is its square.
const NOISE_STD: f64 = 0.5;

/// Spurious-correlation strengths: train environments space mu over
/// [1, 2], test environments over [-2, -1] (sign reversed).
fn mu_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| lo + (hi - lo) * i as f64 / (k - 1).max(1) as f64)
        .collect()
}

pub fn gen_synthetic_invariance(
    kind: SyntheticKind,
    d_inv: usize,
    d_spu: usize,
    n_env: usize,
    n_per_env: usize,
    scramble: bool,
    seed: u64,
) -> EnvironmentSuite {
    assert!(d_inv >= 1 && d_spu >= 1, "dimensions must be positive");
    assert!(n_env >= 2, "at least two environments required");
    let d = d_inv + d_spu;
    let mut shared = env_rng(seed, 0);
    let beta: Vec<f64> = (0..d_inv).map(|_| normal(&mut shared)).collect();
    let mix = scramble.then(|| random_orthogonal(d, &mut shared));

    let gen_env = |mu: f64, stream: u64, env_id: String| -> EnvironmentBatch {
        let mut rng = env_rng(seed, stream);
        let mut inputs = Vec::with_capacity(n_per_env * d);
        let mut targets = Vec::with_capacity(n_per_env);
        for _ in 0..n_per_env {
            let x_inv: Vec<f64> = (0..d_inv).map(|_| normal(&mut rng)).collect();
            let signal: f64 = beta.iter().zip(&x_inv).map(|(b, x)| b * x).sum();
            let (y, drive) = match kind {
                SyntheticKind::RegressionInvSpu => {
                    let y = signal + NOISE_STD * normal(&mut rng);
                    (y, y)
                }
                SyntheticKind::ClassificationInvSpu => {
                    let p = 1.0 / (1.0 + (-signal).exp());
                    let y = f64::from(rng.random_range(0.0..1.0) < p);
                    (y, 2.0 * y - 1.0)
                }
            };
            let mut row = x_inv;
            for _ in 0..d_spu {
                row.push(mu * drive + normal(&mut rng));
            }
            let row = match &mix {
                Some(s) => apply(s, &row),
                None => row,
            };
            inputs.extend(row);
            targets.push(y);
        }
        EnvironmentBatch {
            inputs: Tensor::new(vec![n_per_env, d], inputs),
            targets: Tensor::new(vec![n_per_env, 1], targets),
            env_params: BTreeMap::from([("mu".to_string(), mu)]),
            env_id,
            seed: stream,
        }
    };

    let train: Vec<_> = mu_grid(1.0, 2.0, n_env)
        .into_iter()
        .enumerate()
        .map(|(i, mu)| gen_env(mu, i as u64 + 1, format!("train{i}")))
        .collect();
    let test: Vec<_> = mu_grid(-2.0, -1.0, n_env)
        .into_iter()
        .enumerate()
        .map(|(i, mu)| gen_env(mu, TEST_STREAM_BASE + i as u64, format!("test{i}")))
        .collect();

    // Oracle: predict from the invariant block only. In observation space
    // its coefficients are S·[beta; 0].
    let mut w_full = beta.clone();
    w_full.resize(d, 0.0);
    let coefficients = match &mix {
        Some(s) => apply(s, &w_full),
        None => w_full,
    };
    let irreducible_error = match kind {
        SyntheticKind::RegressionInvSpu => NOISE_STD * NOISE_STD,
        SyntheticKind::ClassificationInvSpu => {
            // 0-1 error of the sign-of-signal rule, estimated once.
            let mut rng = env_rng(seed, u64::MAX);
            let n = 200_000;
            (0..n)
                .map(|_| {
                    let signal: f64 = beta.iter().map(|b| b * normal(&mut rng)).sum();
                    let p = 1.0 / (1.0 + (-signal).exp());
                    p.min(1.0 - p)
                })
                .sum::<f64>()
                / n as f64
        }
    };

    EnvironmentSuite {
        train,
        test,
        generator_kind: match kind {
            SyntheticKind::RegressionInvSpu => "synthetic-regression-inv-spu".into(),
            SyntheticKind::ClassificationInvSpu => "synthetic-classification-inv-spu".into(),
        },
        master_seed: seed,
        oracle: Some(SuiteOracle {
            coefficients,
            irreducible_error,
            scramble: mix,
        }),
    }
}

/// S x for a row vector x.
fn apply(s: &Tensor, x: &[f64]) -> Vec<f64> {
    let (d, _) = s.dims2();
    (0..d)
        .map(|i| s.data[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian draw. Redraws
/// until no row is axis-aligned, so no coordinate mask in observation space
/// can isolate the invariant block.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    loop {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
        for _ in 0..d {
            rows.push((0..d).map(|_| normal(rng)).collect());
        }
        let mut ok = true;
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= dot * b;
                }
            }
            let norm: f64 = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for a in rows[i].iter_mut() {
                *a /= norm;
            }
        }
        if !ok {
            continue;
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        if flat.iter().all(|a| a.abs() < 0.99) {
            return Tensor::new(vec![d, d], flat);
        }
    }
}

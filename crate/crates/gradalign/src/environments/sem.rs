//! The two-feature linear structural equation model:
//! X1 = N0, Y = X1 + N1, X2 = eps*Y + N2 with independent standard normals.

use super::{env_rng, normal, EnvironmentBatch, EnvironmentSuite};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub fn gen_linear_sem(eps_values: &[f64], n_per_env: usize, seed: u64) -> EnvironmentSuite {
    assert!(!eps_values.is_empty(), "at least one environment required");
    assert!(n_per_env >= 2, "n_per_env must be at least 2");
    let train = eps_values
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let stream = i as u64 + 1;
            let mut rng = env_rng(seed, stream);
            let mut inputs = Vec::with_capacity(n_per_env * 2);
            let mut targets = Vec::with_capacity(n_per_env);
            for _ in 0..n_per_env {
                let x1 = normal(&mut rng);
                let y = x1 + normal(&mut rng);
                let x2 = eps * y + normal(&mut rng);
                inputs.push(x1);
                inputs.push(x2);
                targets.push(y);
            }
            EnvironmentBatch {
                inputs: Tensor::new(vec![n_per_env, 2], inputs),
                targets: Tensor::new(vec![n_per_env, 1], targets),
                env_params: BTreeMap::from([("eps".to_string(), eps)]),
                env_id: format!("train{i}"),
                seed: stream,
            }
        })
        .collect();
    EnvironmentSuite {
        train,
        test: Vec::new(),
        generator_kind: "linear-sem".into(),
        master_seed: seed,
        oracle: None,
    }
}

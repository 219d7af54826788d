//! Deterministic benchmark-environment generators and suite storage.
//!
//! Every generator is a pure function of (config, master seed); environment
//! k draws from an independent stream of the master-seeded cipher, so suites
//! are bit-identical across runs and environments could be generated in any
//! order.

mod mnist;
mod sem;
mod suite;
mod synthetic;

pub use mnist::{downsample_14, load_mnist_idx, make_cmnist, make_ecmnist, write_mnist_idx, CmnistConfig, EcmnistConfig, MnistStore};
pub use sem::gen_linear_sem;
pub use suite::{export_suite, import_suite};
pub use synthetic::{gen_synthetic_invariance, SyntheticKind};

use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One environment's sample plus its generating parameters.
#[derive(Debug, Clone)]
pub struct EnvironmentBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub env_params: BTreeMap<String, f64>,
    pub env_id: String,
    /// Stream index of the generator cipher this batch was drawn from.
    pub seed: u64,
}

impl EnvironmentBatch {
    pub fn n(&self) -> usize {
        self.inputs.dims2().0
    }
}

/// Ground truth published by generators whose best invariant predictor is
/// known by construction, so benchmarks are self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteOracle {
    /// Best invariant coefficients in observation space.
    pub coefficients: Vec<f64>,
    /// Loss of the oracle predictor in every environment.
    pub irreducible_error: f64,
    /// The orthogonal mixing matrix applied to inputs, when any.
    pub scramble: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct EnvironmentSuite {
    pub train: Vec<EnvironmentBatch>,
    pub test: Vec<EnvironmentBatch>,
    pub generator_kind: String,
    pub master_seed: u64,
    pub oracle: Option<SuiteOracle>,
}

impl EnvironmentSuite {
    pub fn input_dim(&self) -> usize {
        self.train[0].inputs.dims2().1
    }

    /// Train followed by test environments.
    pub fn union(&self) -> impl Iterator<Item = &EnvironmentBatch> {
        self.train.iter().chain(self.test.iter())
    }
}

/// Independent per-environment stream of the master-seeded cipher.
/// Train environments use streams 1.., test environments 1_000_001...
pub(crate) fn env_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const TEST_STREAM_BASE: u64 = 1_000_001;

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

//! Suite storage: a directory with a JSON manifest plus one raw
//! little-endian float64 file per tensor.

use super::{EnvironmentBatch, EnvironmentSuite, SuiteOracle};
use crate::error::{GradError, Result};
use crate::tensor::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct SuiteManifest {
    generator_kind: String,
    master_seed: u64,
    oracle: Option<SuiteOracle>,
    envs: Vec<EnvManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnvManifest {
    env_id: String,
    split: String,
    seed: u64,
    env_params: BTreeMap<String, f64>,
    inputs_shape: Vec<usize>,
    targets_shape: Vec<usize>,
    inputs_file: String,
    targets_file: String,
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in &t.data {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut r = BufReader::new(File::open(path)?);
    let mut data = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(|_| GradError::Format(format!("{}: truncated tensor file", path.display())))?;
    Ok(Tensor::new(shape.to_vec(), data))
}

pub fn export_suite(suite: &EnvironmentSuite, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut envs = Vec::new();
    for (split, batch) in suite
        .train
        .iter()
        .map(|b| ("train", b))
        .chain(suite.test.iter().map(|b| ("test", b)))
    {
        let inputs_file = format!("{}.inputs.f64", batch.env_id);
        let targets_file = format!("{}.targets.f64", batch.env_id);
        write_tensor(&dir.join(&inputs_file), &batch.inputs)?;
        write_tensor(&dir.join(&targets_file), &batch.targets)?;
        envs.push(EnvManifest {
            env_id: batch.env_id.clone(),
            split: split.to_string(),
            seed: batch.seed,
            env_params: batch.env_params.clone(),
            inputs_shape: batch.inputs.shape.clone(),
            targets_shape: batch.targets.shape.clone(),
            inputs_file,
            targets_file,
        });
    }
    let manifest = SuiteManifest {
        generator_kind: suite.generator_kind.clone(),
        master_seed: suite.master_seed,
        oracle: suite.oracle.clone(),
        envs,
    };
    let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

pub fn import_suite(dir: &Path) -> Result<EnvironmentSuite> {
    let manifest_path = dir.join("manifest.json");
    let f = BufReader::new(File::open(&manifest_path).map_err(|e| {
        GradError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", manifest_path.display()),
        ))
    })?);
    let manifest: SuiteManifest = serde_json::from_reader(f)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for env in manifest.envs {
        let batch = EnvironmentBatch {
            inputs: read_tensor(&dir.join(&env.inputs_file), &env.inputs_shape)?,
            targets: read_tensor(&dir.join(&env.targets_file), &env.targets_shape)?,
            env_params: env.env_params,
            env_id: env.env_id,
            seed: env.seed,
        };
        match env.split.as_str() {
            "train" => train.push(batch),
            "test" => test.push(batch),
            other => {
                return Err(GradError::Format(format!("unknown split {other}")));
            }
        }
    }
    if train.is_empty() {
        return Err(GradError::Format("suite has no train environments".into()));
    }
    Ok(EnvironmentSuite {
        train,
        test,
        generator_kind: manifest.generator_kind,
        master_seed: manifest.master_seed,
        oracle: manifest.oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{gen_linear_sem, gen_synthetic_invariance, SyntheticKind};
    use tempfile::tempdir;

    #[test]
    fn export_import_round_trip() {
        let suite = gen_synthetic_invariance(SyntheticKind::RegressionInvSpu, 2, 2, 2, 30, true, 9);
        let dir = tempdir().unwrap();
        export_suite(&suite, dir.path()).unwrap();
        let loaded = import_suite(dir.path()).unwrap();
        assert_eq!(loaded.generator_kind, suite.generator_kind);
        assert_eq!(loaded.train.len(), 2);
        assert_eq!(loaded.test.len(), 2);
        assert_eq!(loaded.train[0].inputs.data, suite.train[0].inputs.data);
        assert_eq!(loaded.test[1].targets.data, suite.test[1].targets.data);
        assert_eq!(loaded.train[1].env_params, suite.train[1].env_params);
        let oracle = loaded.oracle.unwrap();
        assert_eq!(oracle.coefficients, suite.oracle.as_ref().unwrap().coefficients);
    }

    #[test]
    fn sem_export_writes_one_file_pair_per_env() {
        let suite = gen_linear_sem(&[-1.0, 0.5, 2.0], 10, 1);
        let dir = tempdir().unwrap();
        export_suite(&suite, dir.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), 7); // 3 env pairs + manifest
        assert!(names.contains(&"manifest.json".to_string()));
        assert!(names.contains(&"train2.inputs.f64".to_string()));
    }

    #[test]
    fn truncated_tensor_file_is_reported() {
        let suite = gen_linear_sem(&[0.5], 10, 1);
        let dir = tempdir().unwrap();
        export_suite(&suite, dir.path()).unwrap();
        let path = dir.path().join("train0.inputs.f64");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = import_suite(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}

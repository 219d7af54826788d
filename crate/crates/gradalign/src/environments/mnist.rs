//! MNIST IDX ingestion and the colored-MNIST environment constructions.
//!
//! Observations are 14x14 figures broadcast over three color channels,
//! flattened channels-last (14*14*3 = 588 values per sample). Channel 0
//! carries the figure when the color bit is 1, channel 1 when it is 0;
//! channel 2 is dark except in the extended construction, where it carries
//! the figure when the blue bit is set.

use super::{env_rng, EnvironmentBatch, EnvironmentSuite, TEST_STREAM_BASE};
use crate::error::{GradError, Result};
use crate::tensor::Tensor;
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

/// Environment-parameter draws (flip rates) use their own streams so they
/// stay decoupled from the sample draws of the same environment.
const PARAM_STREAM_BASE: u64 = 2_000_000;

#[derive(Debug, Clone)]
pub struct MnistStore {
    /// [N, 28, 28], values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl MnistStore {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Stand-in digit store built from ten smooth random templates with
    /// per-sample shift and pixel noise. Used when no MNIST files are
    /// available; classes are comfortably separable from shape alone.
    pub fn synthetic(n: usize, seed: u64) -> MnistStore {
        let mut tmpl_rng = env_rng(seed, 0);
        let templates: Vec<Vec<f64>> = (0..10).map(|_| smooth_template(&mut tmpl_rng)).collect();
        let mut rng = env_rng(seed, 1);
        let mut images = Vec::with_capacity(n * 28 * 28);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let digit = rng.random_range(0..10u8);
            let t = &templates[digit as usize];
            let dx = rng.random_range(-2..3i64);
            let dy = rng.random_range(-2..3i64);
            for i in 0..28i64 {
                for j in 0..28i64 {
                    let (si, sj) = (i + dy, j + dx);
                    let base = if (0..28).contains(&si) && (0..28).contains(&sj) {
                        t[(si * 28 + sj) as usize]
                    } else {
                        0.0
                    };
                    let noise = 0.1 * super::normal(&mut rng);
                    images.push((base + noise).clamp(0.0, 1.0));
                }
            }
            labels.push(digit);
        }
        MnistStore {
            images: Tensor::new(vec![n, 28, 28], images),
            labels,
        }
    }
}

/// Low-frequency 28x28 pattern: a random 7x7 grid upsampled bilinearly.
fn smooth_template(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let coarse: Vec<f64> = (0..49).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = Vec::with_capacity(28 * 28);
    for i in 0..28 {
        for j in 0..28 {
            let u = ((i as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, 6.0);
            let v = ((j as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, 6.0);
            let (iu, iv) = (u.floor() as usize, v.floor() as usize);
            let (fu, fv) = (u - iu as f64, v - iv as f64);
            let (iu1, iv1) = ((iu + 1).min(6), (iv + 1).min(6));
            let val = coarse[iu * 7 + iv] * (1.0 - fu) * (1.0 - fv)
                + coarse[iu1 * 7 + iv] * fu * (1.0 - fv)
                + coarse[iu * 7 + iv1] * (1.0 - fu) * fv
                + coarse[iu1 * 7 + iv1] * fu * fv;
            out.push(val);
        }
    }
    out
}

/// Reads the big-endian IDX pair (image magic 2051, label magic 2049) and
/// scales pixels to [0, 1].
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistStore> {
    let mut img = BufReader::new(File::open(images_path)?);
    let magic = img.read_u32::<BigEndian>().map_err(|_| truncated(images_path))?;
    if magic != IMAGES_MAGIC {
        return Err(GradError::Format(format!(
            "{}: wrong magic {magic}, expected {IMAGES_MAGIC} for an images file",
            images_path.display()
        )));
    }
    let n = img.read_u32::<BigEndian>().map_err(|_| truncated(images_path))? as usize;
    let rows = img.read_u32::<BigEndian>().map_err(|_| truncated(images_path))? as usize;
    let cols = img.read_u32::<BigEndian>().map_err(|_| truncated(images_path))? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    img.read_exact(&mut pixels).map_err(|_| truncated(images_path))?;

    let mut lbl = BufReader::new(File::open(labels_path)?);
    let magic = lbl.read_u32::<BigEndian>().map_err(|_| truncated(labels_path))?;
    if magic != LABELS_MAGIC {
        return Err(GradError::Format(format!(
            "{}: wrong magic {magic}, expected {LABELS_MAGIC} for a labels file",
            labels_path.display()
        )));
    }
    let n_labels = lbl.read_u32::<BigEndian>().map_err(|_| truncated(labels_path))? as usize;
    if n_labels != n {
        return Err(GradError::Format(format!(
            "count mismatch: {n} images but {n_labels} labels"
        )));
    }
    let mut labels = vec![0u8; n_labels];
    lbl.read_exact(&mut labels).map_err(|_| truncated(labels_path))?;

    Ok(MnistStore {
        images: Tensor::new(
            vec![n, rows, cols],
            pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        ),
        labels,
    })
}

fn truncated(path: &Path) -> GradError {
    GradError::Format(format!("{}: truncated file", path.display()))
}

/// Writes the store as an IDX pair (the inverse of load_mnist_idx).
pub fn write_mnist_idx(store: &MnistStore, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (n, rows, cols) = (
        store.images.shape[0],
        store.images.shape[1],
        store.images.shape[2],
    );
    let mut img = BufWriter::new(File::create(images_path)?);
    img.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    img.write_u32::<BigEndian>(n as u32)?;
    img.write_u32::<BigEndian>(rows as u32)?;
    img.write_u32::<BigEndian>(cols as u32)?;
    for &p in &store.images.data {
        img.write_all(&[(p * 255.0).round().clamp(0.0, 255.0) as u8])?;
    }
    img.flush()?;
    let mut lbl = BufWriter::new(File::create(labels_path)?);
    lbl.write_u32::<BigEndian>(LABELS_MAGIC)?;
    lbl.write_u32::<BigEndian>(n as u32)?;
    lbl.write_all(&store.labels)?;
    lbl.flush()?;
    Ok(())
}

/// 28x28 -> 14x14 by 2x2 mean pooling.
pub fn downsample_14(images: &Tensor) -> Result<Tensor> {
    if images.shape.len() != 3 || images.shape[1] != 28 || images.shape[2] != 28 {
        return Err(GradError::Shape(format!(
            "expected [n, 28, 28] images, got {:?}",
            images.shape
        )));
    }
    let n = images.shape[0];
    let mut out = Vec::with_capacity(n * 14 * 14);
    for s in 0..n {
        let base = s * 28 * 28;
        for i in 0..14 {
            for j in 0..14 {
                let p = base + (2 * i) * 28 + 2 * j;
                out.push((images.data[p] + images.data[p + 1] + images.data[p + 28] + images.data[p + 29]) / 4.0);
            }
        }
    }
    Ok(Tensor::new(vec![n, 14, 14], out))
}

/// Binary group label: 0 for digits 0-4, 1 for digits 5-9.
pub fn label_group(digit: u8) -> f64 {
    f64::from(digit >= 5)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmnistConfig {
    #[serde(default = "default_color_rates")]
    pub train_color_flip_rates: Vec<f64>,
    #[serde(default = "default_label_flip")]
    pub label_flip_p: f64,
    pub n_per_env: usize,
    #[serde(default = "default_cmnist_test_envs")]
    pub n_test_envs: usize,
}

fn default_color_rates() -> Vec<f64> {
    vec![0.1, 0.2]
}

fn default_label_flip() -> f64 {
    0.25
}

fn default_cmnist_test_envs() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcmnistConfig {
    #[serde(default = "default_n_train_envs")]
    pub n_train_envs: usize,
    #[serde(default = "default_ec_n_per_env")]
    pub n_per_env: usize,
    #[serde(default = "default_e_ch0_range")]
    pub e_ch0_range: [f64; 2],
    #[serde(default = "default_e_ch2_range")]
    pub e_ch2_range: [f64; 2],
    #[serde(default = "default_label_flip")]
    pub p0: f64,
    #[serde(default = "default_p1")]
    pub p1: f64,
    #[serde(default = "default_ec_test_envs")]
    pub n_test_envs: usize,
    #[serde(default = "default_test_e_ch0")]
    pub test_e_ch0: f64,
}

fn default_n_train_envs() -> usize {
    5
}

fn default_ec_n_per_env() -> usize {
    10_000
}

fn default_e_ch0_range() -> [f64; 2] {
    [0.1, 0.2]
}

fn default_e_ch2_range() -> [f64; 2] {
    [0.3, 0.4]
}

fn default_p1() -> f64 {
    0.75
}

fn default_ec_test_envs() -> usize {
    9
}

fn default_test_e_ch0() -> f64 {
    0.1
}

impl Default for EcmnistConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

fn check_prob(p: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(GradError::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

struct ColoredEnv {
    figures: Tensor,
    digits: Vec<u8>,
}

/// Draws n_per_env distinct samples from the store for one environment.
fn pick_samples(
    store: &MnistStore,
    figures: &Tensor,
    n_per_env: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ColoredEnv> {
    if n_per_env > store.n() {
        return Err(GradError::Config(format!(
            "n_per_env {} exceeds store size {}",
            n_per_env,
            store.n()
        )));
    }
    let idx = rand::seq::index::sample(rng, store.n(), n_per_env);
    let mut data = Vec::with_capacity(n_per_env * 196);
    let mut digits = Vec::with_capacity(n_per_env);
    for i in idx {
        data.extend_from_slice(&figures.data[i * 196..(i + 1) * 196]);
        digits.push(store.labels[i]);
    }
    Ok(ColoredEnv {
        figures: Tensor::new(vec![n_per_env, 196], data),
        digits,
    })
}

fn flip(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.random_range(0.0..1.0) < p
}

/// Colored MNIST: the label is a noisy binary digit group, and a color bit
/// that copies the noisy label with environment-dependent flip rate decides
/// which of the first two channels carries the figure.
pub fn make_cmnist(store: &MnistStore, cfg: &CmnistConfig, seed: u64) -> Result<EnvironmentSuite> {
    check_prob(cfg.label_flip_p, "label_flip_p")?;
    for &e in &cfg.train_color_flip_rates {
        check_prob(e, "color flip rate")?;
    }
    let figures = downsample_14(&store.images)?;
    let build = |e: f64, stream: u64, env_id: String| -> Result<EnvironmentBatch> {
        let mut rng = env_rng(seed, stream);
        let env = pick_samples(store, &figures, cfg.n_per_env, &mut rng)?;
        let mut inputs = Vec::with_capacity(cfg.n_per_env * 588);
        let mut targets = Vec::with_capacity(cfg.n_per_env);
        for (s, &digit) in env.digits.iter().enumerate() {
            let y_hat = label_group(digit);
            let y_obs = if flip(&mut rng, cfg.label_flip_p) { 1.0 - y_hat } else { y_hat };
            let c = if flip(&mut rng, e) { 1.0 - y_obs } else { y_obs };
            for &f in &env.figures.data[s * 196..(s + 1) * 196] {
                inputs.push(f * c);
                inputs.push(f * (1.0 - c));
                inputs.push(0.0);
            }
            targets.push(y_obs);
        }
        Ok(EnvironmentBatch {
            inputs: Tensor::new(vec![cfg.n_per_env, 588], inputs),
            targets: Tensor::new(vec![cfg.n_per_env, 1], targets),
            env_params: BTreeMap::from([
                ("e".to_string(), e),
                ("p".to_string(), cfg.label_flip_p),
            ]),
            env_id,
            seed: stream,
        })
    };

    let mut train = Vec::new();
    for (i, &e) in cfg.train_color_flip_rates.iter().enumerate() {
        train.push(build(e, i as u64 + 1, format!("train{i}"))?);
    }
    let mut test = Vec::new();
    for j in 0..cfg.n_test_envs {
        let stream = TEST_STREAM_BASE + j as u64;
        // the test color-flip rate is itself drawn uniformly from [0, 1]
        let e = env_rng(seed, PARAM_STREAM_BASE + stream).random_range(0.0..1.0);
        test.push(build(e, stream, format!("test{j}"))?);
    }
    Ok(EnvironmentSuite {
        train,
        test,
        generator_kind: "cmnist".into(),
        master_seed: seed,
        oracle: None,
    })
}

/// Extended colored MNIST: a third channel carries the figure when a blue
/// bit (probability e_ch2) is set, and the label-flip probability depends
/// on that bit (p0 when clear, p1 when set).
pub fn make_ecmnist(store: &MnistStore, cfg: &EcmnistConfig, seed: u64) -> Result<EnvironmentSuite> {
    for (p, name) in [
        (cfg.p0, "p0"),
        (cfg.p1, "p1"),
        (cfg.test_e_ch0, "test_e_ch0"),
        (cfg.e_ch0_range[0], "e_ch0_range"),
        (cfg.e_ch0_range[1], "e_ch0_range"),
        (cfg.e_ch2_range[0], "e_ch2_range"),
        (cfg.e_ch2_range[1], "e_ch2_range"),
    ] {
        check_prob(p, name)?;
    }
    let figures = downsample_14(&store.images)?;
    let build = |e_ch0: f64, e_ch2: f64, stream: u64, env_id: String| -> Result<EnvironmentBatch> {
        let mut rng = env_rng(seed, stream);
        let env = pick_samples(store, &figures, cfg.n_per_env, &mut rng)?;
        let mut inputs = Vec::with_capacity(cfg.n_per_env * 588);
        let mut targets = Vec::with_capacity(cfg.n_per_env);
        for (s, &digit) in env.digits.iter().enumerate() {
            let y_hat = label_group(digit);
            let b = f64::from(flip(&mut rng, e_ch2));
            let p_flip = if b == 1.0 { cfg.p1 } else { cfg.p0 };
            let y_obs = if flip(&mut rng, p_flip) { 1.0 - y_hat } else { y_hat };
            let c = if flip(&mut rng, e_ch0) { 1.0 - y_obs } else { y_obs };
            for &f in &env.figures.data[s * 196..(s + 1) * 196] {
                inputs.push(f * c);
                inputs.push(f * (1.0 - c));
                inputs.push(f * b);
            }
            targets.push(y_obs);
        }
        Ok(EnvironmentBatch {
            inputs: Tensor::new(vec![cfg.n_per_env, 588], inputs),
            targets: Tensor::new(vec![cfg.n_per_env, 1], targets),
            env_params: BTreeMap::from([
                ("e_ch0".to_string(), e_ch0),
                ("e_ch2".to_string(), e_ch2),
                ("p0".to_string(), cfg.p0),
                ("p1".to_string(), cfg.p1),
            ]),
            env_id,
            seed: stream,
        })
    };

    let mut train = Vec::new();
    for i in 0..cfg.n_train_envs {
        let stream = i as u64 + 1;
        let mut param_rng = env_rng(seed, PARAM_STREAM_BASE + stream);
        let e_ch0 = param_rng.random_range(cfg.e_ch0_range[0]..=cfg.e_ch0_range[1]);
        let e_ch2 = param_rng.random_range(cfg.e_ch2_range[0]..=cfg.e_ch2_range[1]);
        train.push(build(e_ch0, e_ch2, stream, format!("train{i}"))?);
    }
    let mut test = Vec::new();
    for j in 0..cfg.n_test_envs {
        let stream = TEST_STREAM_BASE + j as u64;
        let e_ch2 = env_rng(seed, PARAM_STREAM_BASE + stream).random_range(0.0..1.0);
        test.push(build(cfg.test_e_ch0, e_ch2, stream, format!("test{j}"))?);
    }
    Ok(EnvironmentSuite {
        train,
        test,
        generator_kind: "ecmnist".into(),
        master_seed: seed,
        oracle: None,
    })
}

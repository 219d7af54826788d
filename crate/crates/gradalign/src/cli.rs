//! Command-line front end: suite generation, training, evaluation, lambda
//! sweeps, self-verification, and report tables, driven by one JSON config
//! with sections {suite, model, train, eval}. Unknown keys are errors.

use crate::algorithms::{train, Algorithm, RunResult, TrainConfig};
use crate::autodiff::HvpMethod;
use crate::environments::{
    export_suite, gen_linear_sem, gen_synthetic_invariance, import_suite, load_mnist_idx,
    make_cmnist, make_ecmnist, CmnistConfig, EcmnistConfig, EnvironmentSuite, MnistStore,
    SyntheticKind,
};
use crate::error::{GradError, Result};
use crate::evaluation::{
    bound_check, kl_alignment_check, lambda_sweep, worst_env_metric, EnvScope, Metric,
};
use crate::models::{build_model, ModelSpec};
use crate::params::ParamVector;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum SuiteConfig {
    LinearSem {
        eps: Vec<f64>,
        n_per_env: usize,
        #[serde(default)]
        seed: u64,
    },
    SyntheticInvariance {
        kind: SyntheticKind,
        #[serde(default = "default_five")]
        d_inv: usize,
        #[serde(default = "default_five")]
        d_spu: usize,
        #[serde(default = "default_five")]
        n_env: usize,
        n_per_env: usize,
        #[serde(default = "default_true")]
        scramble: bool,
        #[serde(default)]
        seed: u64,
    },
    Cmnist {
        #[serde(default)]
        mnist_dir: Option<PathBuf>,
        config: CmnistConfig,
        #[serde(default)]
        seed: u64,
    },
    Ecmnist {
        #[serde(default)]
        mnist_dir: Option<PathBuf>,
        config: EcmnistConfig,
        #[serde(default)]
        seed: u64,
    },
}

fn default_five() -> usize {
    5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_scope")]
    pub scope: EnvScope,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_bound_samples")]
    pub bound_samples: usize,
    /// Lambda grid for the sweep subcommand.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_scope() -> EnvScope {
    EnvScope::Union
}
fn default_bound_samples() -> usize {
    10_000
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1]
}

impl Default for EvalConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Hex digest of the canonicalized (key-sorted) config document.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub suite_dir: Option<String>,
    pub artifacts: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

#[derive(Parser)]
#[command(name = "gradalign", version, about = "Multi-environment training with a gradient-variance penalty")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment suite on disk
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the suite seed
        #[arg(long)]
        seed: Option<u64>,
        /// Use the full-size sample counts instead of desk-scale ones
        #[arg(long)]
        paper_scale: bool,
    },
    /// Train a model on a suite and write the run artifacts
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Pre-generated suite directory; omitted means generate in memory
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Evaluate a finished run: worst-environment metrics and loss bounds
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        format: OutputFormat,
    },
    /// Train across a lambda grid and aggregate worst-env metrics
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        format: OutputFormat,
    },
    /// Run the self-contained analytical checks
    Verify,
    /// Tabulate finished runs
    Report {
        /// Run directories containing run_result.json
        run_dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
        format: OutputFormat,
        /// Aggregate mean and std per (algorithm, lambda, environment count)
        #[arg(long)]
        aggregate: bool,
    },
}

/// Exit codes: 0 ok, 1 config, 2 io, 3 divergence, 4 verification failure.
fn exit_code(e: &GradError) -> i32 {
    match e {
        GradError::Config(_) | GradError::Json(_) | GradError::Shape(_) => 1,
        GradError::Io(_) | GradError::Format(_) => 2,
        GradError::Divergence(_) | GradError::NonFinite(_) => 3,
        GradError::Verify(_) => 4,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, out, seed, paper_scale } => cmd_gen(&config, &out, seed, paper_scale),
        Command::Train { config, suite, out, seed, paper_scale } => {
            cmd_train(&config, suite.as_deref(), &out, seed, paper_scale)
        }
        Command::Eval { config, run, suite, format } => {
            cmd_eval(&config, &run, suite.as_deref(), format)
        }
        Command::Sweep { config, suite, out, format } => {
            cmd_sweep(&config, suite.as_deref(), &out, format)
        }
        Command::Verify => cmd_verify(),
        Command::Report { run_dirs, format, aggregate } => cmd_report(&run_dirs, format, aggregate),
    }
}

/// Canonical form: the parsed document re-serialized with sorted keys.
pub fn canonical_config(raw: &str) -> Result<(serde_json::Value, String)> {
    let value: serde_json::Value = serde_json::from_str(raw)?;
    let canonical = serde_json::to_string(&value)?;
    Ok((value, canonical))
}

pub fn config_hash(canonical: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_config(path: &Path) -> Result<(RunConfig, serde_json::Value, String)> {
    let raw = std::fs::read_to_string(path).map_err(|e| {
        GradError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let config: RunConfig = serde_json::from_str(&raw)?;
    let (value, canonical) = canonical_config(&raw)?;
    Ok((config, value, config_hash(&canonical)))
}

/// Desk-scale suites cap the per-environment sample count; the paper-scale
/// flag restores the full 25000.
const PAPER_SCALE_N: usize = 25_000;

fn build_suite(cfg: &SuiteConfig, seed_override: Option<u64>, paper_scale: bool) -> Result<EnvironmentSuite> {
    match cfg {
        SuiteConfig::LinearSem { eps, n_per_env, seed } => {
            if eps.is_empty() {
                return Err(GradError::Config("eps list is empty".into()));
            }
            Ok(gen_linear_sem(eps, *n_per_env, seed_override.unwrap_or(*seed)))
        }
        SuiteConfig::SyntheticInvariance { kind, d_inv, d_spu, n_env, n_per_env, scramble, seed } => {
            Ok(gen_synthetic_invariance(
                *kind,
                *d_inv,
                *d_spu,
                *n_env,
                *n_per_env,
                *scramble,
                seed_override.unwrap_or(*seed),
            ))
        }
        SuiteConfig::Cmnist { mnist_dir, config, seed } => {
            let seed = seed_override.unwrap_or(*seed);
            let mut config = config.clone();
            if paper_scale {
                config.n_per_env = PAPER_SCALE_N;
            }
            let store = mnist_store(mnist_dir.as_deref(), config.n_per_env, seed)?;
            make_cmnist(&store, &config, seed)
        }
        SuiteConfig::Ecmnist { mnist_dir, config, seed } => {
            let seed = seed_override.unwrap_or(*seed);
            let mut config = config.clone();
            if paper_scale {
                config.n_per_env = PAPER_SCALE_N;
            }
            let store = mnist_store(mnist_dir.as_deref(), config.n_per_env, seed)?;
            make_ecmnist(&store, &config, seed)
        }
    }
}

/// Real MNIST when a directory is given (config field, then
/// GRADALIGN_MNIST_DIR), otherwise the synthetic digit store sized to
/// cover the suite.
fn mnist_store(dir: Option<&Path>, n_per_env: usize, seed: u64) -> Result<MnistStore> {
    let env_dir = std::env::var_os("GRADALIGN_MNIST_DIR").map(PathBuf::from);
    match dir.or(env_dir.as_deref()) {
        Some(d) => load_mnist_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte")),
        None => Ok(MnistStore::synthetic((2 * n_per_env).clamp(10_000, 60_000), seed)),
    }
}

fn cmd_gen(config_path: &Path, out: &Path, seed: Option<u64>, paper_scale: bool) -> Result<()> {
    let (config, _, hash) = read_config(config_path)?;
    let suite = build_suite(&config.suite, seed, paper_scale)?;
    export_suite(&suite, out)?;
    println!(
        "wrote {} train + {} test environments to {} (config {})",
        suite.train.len(),
        suite.test.len(),
        out.display(),
        &hash[..12]
    );
    Ok(())
}

fn effective_model(config: &RunConfig, suite: &EnvironmentSuite, paper_scale: bool) -> Result<ModelSpec> {
    let mut model = config
        .model
        .clone()
        .ok_or_else(|| GradError::Config("config has no model section".into()))?;
    if model.input_dim == 0 {
        model.input_dim = suite.input_dim();
    }
    if paper_scale && !model.hidden_layers.is_empty() {
        model.hidden_layers = vec![2500; 4];
    }
    model.validate()?;
    Ok(model)
}

fn load_or_build_suite(
    config: &RunConfig,
    suite_dir: Option<&Path>,
    paper_scale: bool,
) -> Result<EnvironmentSuite> {
    match suite_dir {
        Some(d) => import_suite(d),
        None => build_suite(&config.suite, None, paper_scale),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    suite_dir: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    paper_scale: bool,
) -> Result<()> {
    let started = std::time::Instant::now();
    let (config, config_value, hash) = read_config(config_path)?;
    let suite = load_or_build_suite(&config, suite_dir, paper_scale)?;
    let model = effective_model(&config, &suite, paper_scale)?;
    let mut train_cfg = config
        .train
        .clone()
        .ok_or_else(|| GradError::Config("config has no train section".into()))?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let (result, params) = train(&model, &suite, &train_cfg)?;

    std::fs::create_dir_all(out)?;
    write_json(&out.join("run_result.json"), &result)?;
    write_json(&out.join("params.json"), &params)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash,
        config: config_value,
        suite_dir: suite_dir.map(|d| d.display().to_string()),
        artifacts: BTreeMap::from([
            ("run_result".to_string(), "run_result.json".to_string()),
            ("params".to_string(), "params.json".to_string()),
        ]),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    if let Some(msg) = &result.diverged {
        return Err(GradError::Divergence(format!(
            "{msg}; diagnostic artifacts written to {}",
            out.display()
        )));
    }
    let fm = result.final_metrics.as_ref().unwrap();
    match fm.worst_env_accuracy {
        Some(acc) => println!("worst-env accuracy {acc:.4} ({})", out.display()),
        None => println!("worst-env error {:.6} ({})", fm.worst_env_error, out.display()),
    }
    Ok(())
}

fn load_run(run_dir: &Path) -> Result<(RunResult, ParamVector)> {
    let result: RunResult =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run_result.json"))?)?;
    let params: ParamVector =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("params.json"))?)?;
    Ok((result, params))
}

fn cmd_eval(
    config_path: &Path,
    run_dir: &Path,
    suite_dir: Option<&Path>,
    format: OutputFormat,
) -> Result<()> {
    let (config, _, _) = read_config(config_path)?;
    let eval_cfg = config.eval.clone().unwrap_or_default();
    let suite = load_or_build_suite(&config, suite_dir, false)?;
    let (result, params) = load_run(run_dir)?;
    let (record, _) = build_model(&result.model)?;

    let classifier = record.node("logits").is_some();
    let worst_error = worst_env_metric(&record, &params, &suite, Metric::Error, eval_cfg.scope)?;
    let worst_accuracy = classifier
        .then(|| worst_env_metric(&record, &params, &suite, Metric::Accuracy, eval_cfg.scope))
        .transpose()?;
    let bound = bound_check(
        &record,
        &params,
        &suite,
        eval_cfg.eta,
        result.train.penalty_weight,
        eval_cfg.bound_samples,
    )?;

    #[derive(Serialize)]
    struct EvalReport {
        worst_env_error: f64,
        worst_env_accuracy: Option<f64>,
        scope: EnvScope,
        bound: crate::evaluation::BoundReport,
    }
    let report = EvalReport {
        worst_env_error: worst_error,
        worst_env_accuracy: worst_accuracy,
        scope: eval_cfg.scope,
        bound,
    };
    match format {
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        OutputFormat::Csv => {
            println!("worst_env_error,worst_env_accuracy");
            println!(
                "{},{}",
                report.worst_env_error,
                report.worst_env_accuracy.map_or(String::new(), |v| v.to_string())
            );
            print!("{}", report.bound.to_csv());
        }
    }
    Ok(())
}

fn cmd_sweep(
    config_path: &Path,
    suite_dir: Option<&Path>,
    out: &Path,
    format: OutputFormat,
) -> Result<()> {
    let (config, _, _) = read_config(config_path)?;
    let eval_cfg = config.eval.clone().unwrap_or_default();
    if eval_cfg.lambda_grid.is_empty() {
        return Err(GradError::Config("eval.lambda_grid is empty".into()));
    }
    let suite = load_or_build_suite(&config, suite_dir, false)?;
    let model = effective_model(&config, &suite, false)?;
    let base = config
        .train
        .clone()
        .ok_or_else(|| GradError::Config("config has no train section".into()))?;
    let sweep = lambda_sweep(&model, &suite, &base, &eval_cfg.lambda_grid, &eval_cfg.seeds)?;
    std::fs::create_dir_all(out)?;
    match format {
        OutputFormat::Json => write_json(&out.join("sweep.json"), &sweep)?,
        OutputFormat::Csv => std::fs::write(out.join("sweep.csv"), sweep.to_csv())?,
    }
    for s in &sweep.summary {
        println!(
            "lambda {:>10}: metric {:.4} +- {}  penalty {:.3e}  ({} ok, {} diverged)",
            s.lambda,
            s.metric_mean,
            s.metric_std.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            s.penalty_mean,
            s.n_ok,
            s.n_diverged
        );
    }
    Ok(())
}

fn cmd_verify() -> Result<()> {
    use crate::algorithms::{gradient_stats, iga_penalty_gradient, trace_variance};
    use crate::autodiff::{gradient, DEFAULT_FD_STEP};
    use crate::models::sem_population_loss;
    use crate::tensor::Tensor;
    use rand::{RngExt, SeedableRng};

    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{} {name}{}", if ok { "PASS" } else { "FAIL" }, if ok { String::new() } else { format!(": {detail}") });
        if !ok {
            failures.push(name.to_string());
        }
    };

    // 1. analytic gradient-variance formula on the two-feature SEM
    {
        let (record, layout) = sem_population_loss();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let w = [rng.random_range(-2.0..3.0), rng.random_range(-2.0..2.0)];
            let eps: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let params = ParamVector::new(w.to_vec(), layout.clone());
            let grads: Vec<ParamVector> = eps
                .iter()
                .map(|&e| gradient(&record, &params, &[&Tensor::scalar(e)]))
                .collect::<Result<_>>()?;
            let p = trace_variance(&grads)?;
            let n = eps.len() as f64;
            let m = eps.iter().sum::<f64>() / n;
            let m2 = eps.iter().map(|e| e * e).sum::<f64>() / n;
            let coord2 = eps
                .iter()
                .map(|e| {
                    let d = (e - m) * (w[0] - 2.0) + 2.0 * (e * e - m2) * w[1];
                    d * d
                })
                .sum::<f64>()
                / n;
            let closed = 4.0 * (m2 - m * m) * w[1] * w[1] + 4.0 * coord2;
            worst = worst.max((p - closed).abs() / closed.abs().max(1e-12));
        }
        check("closed-form gradient variance", worst < 1e-8, format!("rel err {worst:.2e}"));
    }

    // 2. penalty gradient vs finite differences of the penalty
    {
        let (record, layout) = sem_population_loss();
        let envs: Vec<_> = [-1.0, 0.5, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &e)| crate::environments::EnvironmentBatch {
                inputs: Tensor::scalar(e),
                targets: Tensor::scalar(0.0),
                env_params: BTreeMap::new(),
                env_id: format!("e{i}"),
                seed: 0,
            })
            .collect();
        let params = ParamVector::new(vec![0.8, -0.3], layout);
        let exact = iga_penalty_gradient(&record, &params, &envs, HvpMethod::ForwardOverReverse, DEFAULT_FD_STEP)?;
        let fd = iga_penalty_gradient(&record, &params, &envs, HvpMethod::CentralFd, DEFAULT_FD_STEP)?;
        let rel = exact.sub(&fd).norm() / exact.norm().max(1e-12);
        check("penalty-gradient method agreement", rel < 1e-6, format!("rel err {rel:.2e}"));

        let h = 1e-5;
        let mut fdg = params.zeros_like();
        let mut probe = params.clone();
        for i in 0..2 {
            let orig = probe.values[i];
            let mut at = |v: f64| -> Result<f64> {
                probe.values[i] = v;
                let (_, stats) = gradient_stats(&record, &probe, &envs)?;
                Ok(stats.trace_variance)
            };
            let fp = at(orig + h)?;
            let fm = at(orig - h)?;
            probe.values[i] = orig;
            fdg.values[i] = (fp - fm) / (2.0 * h);
        }
        let rel = exact.sub(&fdg).norm() / fdg.norm().max(1e-12);
        check("penalty gradient vs finite differences", rel < 1e-6, format!("rel err {rel:.2e}"));
    }

    // 3. small-step alignment: divergence / (alpha * penalty) -> 1, residual O(alpha^2)
    {
        let suite = gen_synthetic_invariance(SyntheticKind::ClassificationInvSpu, 3, 2, 2, 500, false, 11);
        let spec = ModelSpec::mlp(5, &[4], false, 1);
        let (record, params) = build_model(&spec)?;
        let report = kl_alignment_check(&record, &params, &suite.train, &[1e-1, 1e-2, 1e-3, 1e-4])?;
        let ratio = report.ratios[2];
        check("alignment ratio at alpha 1e-3", (ratio - 1.0).abs() < 0.05, format!("ratio {ratio:.4}"));
        check(
            "alignment residual slope",
            (report.residual_slope - 2.0).abs() < 0.3,
            format!("slope {:.3}", report.residual_slope),
        );
    }

    // 4. mixture-bound identities
    {
        let suite = gen_linear_sem(&[-1.0, 0.5, 2.0], 500, 5);
        let spec = ModelSpec::linear(2, 0);
        let (record, params) = build_model(&spec)?;
        let mut ok = true;
        let mut detail = String::new();
        for eta in [0.0, 0.1, 0.5] {
            let r = bound_check(&record, &params, &suite, eta, 1.0, 20_000)?;
            if r.mixture_identity_gap >= 1e-12 || r.sampled_sup > r.closed_form_sup + 1e-9 {
                ok = false;
                detail = format!("eta {eta}: gap {:.1e}", r.mixture_identity_gap);
            }
        }
        check("affine-mixture loss identities", ok, detail);
    }

    // 5. invariant-solution recovery on the sampled SEM
    {
        let suite = gen_linear_sem(&[-1.0, 0.5, 2.0], 2000, 7);
        let spec = ModelSpec::linear(2, 0);
        let mut cfg = TrainConfig::new(Algorithm::Iga, 800);
        cfg.penalty_weight = 1e3;
        cfg.adam.lr = 0.01;
        let (_, params) = train(&spec, &suite, &cfg)?;
        let w = params.segment_values("w");
        let ok = (w[0] - 2.0).abs() < 0.05 && w[1].abs() < 0.05;
        check("invariant SEM recovery", ok, format!("w [{:.4}, {:.4}]", w[0], w[1]));
    }

    if failures.is_empty() {
        Ok(())
    } else {
        Err(GradError::Verify(format!("{} check(s) failed: {}", failures.len(), failures.join(", "))))
    }
}

#[derive(Debug, Clone, Serialize)]
struct ReportRow {
    algorithm: String,
    lambda: f64,
    n_env: usize,
    seed: u64,
    worst_env_error: f64,
    mean_train_error: f64,
}

fn cmd_report(run_dirs: &[PathBuf], format: OutputFormat, aggregate: bool) -> Result<()> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let result: RunResult = match std::fs::read_to_string(dir.join("run_result.json"))
            .map_err(GradError::from)
            .and_then(|s| serde_json::from_str(&s).map_err(GradError::from))
        {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", dir.display());
                continue;
            }
        };
        let Some(fm) = &result.final_metrics else {
            eprintln!("warning: skipping {}: run diverged", dir.display());
            continue;
        };
        // error means 1 - accuracy for classifiers, mean loss otherwise
        let per_env_error = |losses: &[f64], accs: &Option<Vec<f64>>| -> Vec<f64> {
            match accs {
                Some(a) => a.iter().map(|x| 1.0 - x).collect(),
                None => losses.to_vec(),
            }
        };
        let train_err = per_env_error(&fm.train_env_losses, &fm.train_env_accuracies);
        let worst = match fm.worst_env_accuracy {
            Some(acc) => 1.0 - acc,
            None => fm.worst_env_error,
        };
        rows.push(ReportRow {
            algorithm: format!("{:?}", result.train.algorithm).to_lowercase(),
            lambda: result.train.penalty_weight,
            n_env: fm.train_env_losses.len(),
            seed: result.train.seed,
            worst_env_error: worst,
            mean_train_error: train_err.iter().sum::<f64>() / train_err.len() as f64,
        });
    }
    rows.sort_by(|a, b| {
        (a.algorithm.as_str(), a.lambda, a.n_env, a.seed)
            .partial_cmp(&(b.algorithm.as_str(), b.lambda, b.n_env, b.seed))
            .unwrap()
    });

    if aggregate {
        #[derive(Serialize)]
        struct AggRow {
            algorithm: String,
            lambda: f64,
            n_env: usize,
            n_runs: usize,
            worst_env_error_mean: f64,
            worst_env_error_std: f64,
        }
        let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
        for r in &rows {
            groups
                .entry((r.algorithm.clone(), format!("{:e}", r.lambda), r.n_env))
                .or_default()
                .push(r.worst_env_error);
        }
        let agg: Vec<AggRow> = groups
            .into_iter()
            .map(|((algorithm, lambda, n_env), vals)| {
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
                AggRow {
                    algorithm,
                    lambda: lambda.parse().unwrap(),
                    n_env,
                    n_runs: vals.len(),
                    worst_env_error_mean: mean,
                    worst_env_error_std: std,
                }
            })
            .collect();
        match format {
            OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&agg)?),
            OutputFormat::Csv => {
                println!("algorithm,lambda,n_env,n_runs,worst_env_error_mean,worst_env_error_std");
                for r in agg {
                    println!(
                        "{},{},{},{},{},{}",
                        r.algorithm, r.lambda, r.n_env, r.n_runs, r.worst_env_error_mean, r.worst_env_error_std
                    );
                }
            }
        }
    } else {
        match format {
            OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
            OutputFormat::Csv => {
                println!("algorithm,lambda,n_env,seed,worst_env_error,mean_train_error");
                for r in rows {
                    println!(
                        "{},{},{},{},{},{}",
                        r.algorithm, r.lambda, r.n_env, r.seed, r.worst_env_error, r.mean_train_error
                    );
                }
            }
        }
    }
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use metalora::harness::{
    emit_outputs, run_comparison, run_default_sweeps, run_probe, summarize, verify_theorems, ExperimentConfig,
    OutputFormat, ProbeExperiment, VerificationReport, VerifyConfig,
};
use metalora::landscape::{classify_stationary_point, StationaryReport};
use metalora::objectives::test_loss_population;
use metalora::rng::labels;
use metalora::solvers::{finetune_empirical, init_meta_params, solve_sr_empirical, train_meta_gd};
use metalora::task_model::{generate_ground_truth, sample_retraining_tasks, sample_task};
use metalora::{EmpiricalObjective, Error, GroundTruth, MetaParams, PopulationObjective, RngSpec, TaskDataset, TrainTrace};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "metalora", version, about = "Linear Meta-LoRA experiments and landscape checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated output formats.
    #[arg(long, value_delimiter = ',', default_value = "csv,json,plot")]
    format: Vec<OutputFormat>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a ground truth with retraining and fine-tuning data.
    Gen(Common),
    /// Meta-LoRA and standard retraining on generated data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen` (defaults to --out).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Train Meta-LoRA on the population loss instead of the samples.
        #[arg(long)]
        population: bool,
    },
    /// Fine-tune both retrained models on the held-out samples.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Directory holding the `gen` and `train` outputs (defaults to --out).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Meta-LoRA versus SR+LoRA sweeps; without a sweep in the config, the
    /// four default single-axis sweeps.
    Ablate(Common),
    /// Invariant verification suites; exits with 1 when a check fails.
    Verify(Common),
    /// Search for spurious local minima of the reduced loss.
    ProbeSpurious(Common),
    /// Classify a parameter point of a ground truth.
    Classify(Common),
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
                .map_err(Into::into)
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text + "\n").map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

fn experiment(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen(common: &Common) -> Result<u8> {
    let cfg = experiment(common)?;
    let spec = RngSpec::new(cfg.master_seed);
    let gt = generate_ground_truth(cfg.d, cfg.k, cfg.tasks, spec.derive(labels::GROUND_TRUTH))?;
    let data_spec = spec.derive(labels::TASK_DATA);
    let data = sample_retraining_tasks(&gt, cfg.n_retrain, cfg.sigma_x, cfg.sigma_eps, data_spec)?;
    let test = sample_task(
        &gt,
        gt.test_task(),
        cfg.n_finetune,
        cfg.sigma_x,
        cfg.sigma_eps,
        data_spec.derive_indexed(labels::TASK_DATA, gt.test_task() as u64),
    )?;
    for (name, path) in [
        ("ground truth", write_json(&common.out, "ground_truth.json", &gt)?),
        ("retraining data", write_json(&common.out, "retrain_data.json", &data)?),
        ("fine-tuning data", write_json(&common.out, "finetune_data.json", &test)?),
    ] {
        println!("{name:<18} {}", path.display());
    }
    Ok(0)
}

#[derive(Serialize, Deserialize)]
struct SrModel {
    #[serde(with = "metalora::schema::matrix")]
    a: nalgebra::DMatrix<f64>,
    ridge: f64,
    retrain_loss: f64,
}

fn train(common: &Common, input: Option<&Path>, population: bool) -> Result<u8> {
    let cfg = experiment(common)?;
    let input = input.unwrap_or(&common.out);
    let gt: GroundTruth = read_json(&input.join("ground_truth.json"))?;
    let data: Vec<TaskDataset> = read_json(&input.join("retrain_data.json"))?;
    let spec = RngSpec::new(cfg.master_seed);
    let init = init_meta_params(gt.d, gt.k, gt.tasks, cfg.train.init_scale, spec);
    let trace = if population {
        train_meta_gd(&init, &PopulationObjective { gt: &gt }, &cfg.train, spec.derive(labels::META_INIT))?
    } else {
        let obj = EmpiricalObjective::new(&data, gt.k)?;
        train_meta_gd(&init, &obj, &cfg.train, spec.derive(labels::META_INIT))?
    };
    let a_sr = solve_sr_empirical(&data, cfg.ridge)?;
    let sr_loss = data
        .iter()
        .map(|ds| metalora::objectives::task_loss_empirical(&a_sr, ds))
        .sum::<metalora::Result<f64>>()?;
    write_json(&common.out, "meta_trace.json", &trace)?;
    write_json(
        &common.out,
        "sr.json",
        &SrModel {
            a: a_sr.clone(),
            ridge: cfg.ridge,
            retrain_loss: sr_loss,
        },
    )?;
    println!("{:<10} {:>14} {:>14} {:>10} {:>10}", "method", "retrain_loss", "||A-A*||_F", "iters", "converged");
    println!(
        "{:<10} {:>14.6e} {:>14.6e} {:>10} {:>10}",
        "MetaLoRA",
        trace.final_loss(),
        (&trace.final_params.a - &gt.a_star).norm(),
        trace.iterations_used,
        trace.converged
    );
    println!(
        "{:<10} {:>14.6e} {:>14.6e} {:>10} {:>10}",
        "SR",
        sr_loss,
        (&a_sr - &gt.a_star).norm(),
        "-",
        "-"
    );
    Ok(0)
}

#[derive(Serialize)]
struct FinetuneResult {
    method: &'static str,
    rank: usize,
    test_loss: f64,
    adapter: metalora::Adapter,
    converged: bool,
    iterations_used: usize,
}

fn finetune(common: &Common, input: Option<&Path>) -> Result<u8> {
    let cfg = experiment(common)?;
    let input = input.unwrap_or(&common.out);
    let gt: GroundTruth = read_json(&input.join("ground_truth.json"))?;
    let test: TaskDataset = read_json(&input.join("finetune_data.json"))?;
    let meta: TrainTrace<MetaParams> = read_json(&input.join("meta_trace.json"))?;
    let sr: SrModel = read_json(&input.join("sr.json"))?;
    let rank = cfg.finetune_rank_policy.resolve(gt.k, gt.tasks);
    let spec = RngSpec::new(cfg.master_seed).derive(labels::FINETUNE_INIT);
    let mut results = Vec::new();
    for (method, a_hat) in [("MetaLoRA", &meta.final_params.a), ("SR_LoRA", &sr.a)] {
        let (adapter, trace) = finetune_empirical(a_hat, &test, rank, &cfg.finetune, spec)?;
        results.push(FinetuneResult {
            method,
            rank,
            test_loss: test_loss_population(&adapter, a_hat, &gt)?,
            adapter,
            converged: trace.converged,
            iterations_used: trace.iterations_used,
        });
    }
    write_json(&common.out, "finetune.json", &results)?;
    println!("{:<10} {:>6} {:>14} {:>10}", "method", "rank", "test_loss", "converged");
    for r in &results {
        println!("{:<10} {:>6} {:>14.6e} {:>10}", r.method, r.rank, r.test_loss, r.converged);
    }
    Ok(0)
}

fn ablate(common: &Common) -> Result<u8> {
    let cfg = experiment(common)?;
    let rows = if cfg.sweep.is_some() {
        run_comparison(&cfg)?
    } else {
        run_default_sweeps(&cfg)?
    };
    let written = emit_outputs(&rows, None, &common.out, &common.format)?;
    println!("{:<8} {:>10} {:<9} {:>12} {:>12} {:>12} {:>7}", "axis", "value", "method", "median", "q1", "q3", "failed");
    for s in summarize(&rows) {
        println!(
            "{:<8} {:>10} {:<9} {:>12.4e} {:>12.4e} {:>12.4e} {:>7}",
            s.sweep_axis,
            s.sweep_value,
            s.method.name(),
            s.median,
            s.q1,
            s.q3,
            s.failed
        );
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(0)
}

fn print_report(report: &VerificationReport) {
    println!("{:<42} {:>6} {:>13} {:>13} {:>9}", "check", "result", "worst", "threshold", "instances");
    for c in &report.checks {
        println!(
            "{:<42} {:>6} {:>13.4e} {:>13.4e} {:>9}",
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            c.measured,
            c.threshold,
            c.instances
        );
        if !c.detail.is_empty() {
            println!("    {}", c.detail);
        }
    }
}

fn verify(common: &Common) -> Result<u8> {
    let mut cfg: VerifyConfig = load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    let report = verify_theorems(&cfg)?;
    print_report(&report);
    if common.format.contains(&OutputFormat::Json) {
        println!("wrote {}", write_json(&common.out, "report.json", &report)?.display());
    }
    Ok(if report.all_passed { 0 } else { EXIT_VERIFY })
}

fn probe(common: &Common) -> Result<u8> {
    let mut cfg: ProbeExperiment = load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    let report = run_probe(&cfg)?;
    println!(
        "d={} k={} T={}: {} starts, {} reached zero loss, {} saddles, {} unconverged, {} candidates",
        cfg.d, cfg.k, cfg.tasks, report.starts, report.reached_global, report.saddles, report.unconverged, report.candidates
    );
    for hit in &report.hits {
        let c = hit.outcome.candidate.as_ref().expect("hits carry a candidate");
        println!(
            "instance {}: L_hat {:.4e}, |grad| {:.2e}, reduced min eig {:.3e}, classification {:?}",
            hit.instance, c.reduced_loss, c.reduced_grad_norm, c.reduced_min_eig, c.report.classification
        );
        if let Some(change) = hit.plateau_loss_change {
            println!("    plain GD loss change over {} iterations: {change:.3e}", cfg.plateau_iters);
        }
        match (&hit.certificate, &hit.certificate_error) {
            (Some(cert), _) => println!(
                "    {:?}: min r {:.4e} over {} points, gamma {:.1e}, certified {}",
                cert.mode, cert.min_r_value, cert.points_checked, cert.gamma, cert.certified
            ),
            (None, Some(e)) => println!("    certificate: {e}"),
            (None, None) => {}
        }
    }
    if common.format.contains(&OutputFormat::Json) {
        println!("wrote {}", write_json(&common.out, "probe.json", &report)?.display());
    }
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyConfig {
    /// Paths are relative to the config file.
    ground_truth: PathBuf,
    params: PathBuf,
    #[serde(default = "default_tol")]
    grad_tol: f64,
    #[serde(default = "default_tol")]
    eig_tol: f64,
}

fn default_tol() -> f64 {
    1e-8
}

fn classify(common: &Common) -> Result<u8> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("classify needs --config naming ground_truth and params files".into()))?;
    let cfg: ClassifyConfig = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let gt: GroundTruth = read_json(&base.join(&cfg.ground_truth))?;
    let params_path = base.join(&cfg.params);
    // Accept either bare parameters or a training trace.
    let p: MetaParams = match read_json::<TrainTrace<MetaParams>>(&params_path) {
        Ok(trace) => trace.final_params,
        Err(_) => read_json(&params_path)?,
    };
    let report: StationaryReport = classify_stationary_point(&p, &gt, cfg.grad_tol, cfg.eig_tol)?;
    println!("{:<22} {:?}", "classification", report.classification);
    println!("{:<22} {:.6e}", "loss", report.loss_value);
    println!("{:<22} {:.6e}", "gradient norm", report.grad_norm);
    println!("{:<22} {:.6e}", "min Hessian eigenvalue", report.min_hessian_eig);
    if let Some(rq) = report.curvature_rayleigh {
        println!("{:<22} {:.6e}", "direction curvature", rq);
    }
    let b: Vec<String> = report.b_norms.iter().map(|v| format!("{v:.4e}")).collect();
    println!("{:<22} [{}]", "||B_t||_F", b.join(", "));
    if common.format.contains(&OutputFormat::Json) {
        println!("wrote {}", write_json(&common.out, "classify.json", &report)?.display());
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::Csv(_) | Error::Plot(_)) => EXIT_IO,
        Some(Error::Json(e)) if e.is_io() => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Gen(c) => gen(&c),
        Command::Train { common, input, population } => train(&common, input.as_deref(), population),
        Command::Finetune { common, input } => finetune(&common, input.as_deref()),
        Command::Ablate(c) => ablate(&c),
        Command::Verify(c) => verify(&c),
        Command::ProbeSpurious(c) => probe(&c),
        Command::Classify(c) => classify(&c),
    }
    .context("metalora failed")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

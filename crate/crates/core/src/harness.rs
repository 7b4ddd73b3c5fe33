//! Experiment orchestration: Meta-LoRA versus SR+LoRA sweeps, the theorem
//! verification suite, and result files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{
    certify_local_min, probe_spurious_minimum, unconstrained_instance, NetCertificate, NetMode, ProbeConfig,
    ProbeOutcome, classify_stationary_point, eigenbasis_commutator, find_negative_curvature_t2, hessian_meta, joint_image_dim,
    manufacture_stationary_t2, star_difference_inertia, Classification,
};
use crate::linalg::{min_eigenpair, numerical_rank, outer_self};
use crate::objectives::{
    meta_loss_population, task_loss_empirical, test_loss_population, EmpiricalObjective, MetaParams,
    PopulationObjective,
};
use crate::rng::{labels, RngSpec};
use crate::solvers::{
    finetune_empirical, finetune_population, init_meta_params, paper_default_rank, solve_sr_empirical,
    solve_sr_population, train_meta_gd, TrainConfig,
};
use crate::task_model::{generate_ground_truth, sample_retraining_tasks, sample_task, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    /// `3k` when `T = 2`, otherwise `k`.
    PaperDefault,
    Fixed(usize),
}

impl RankPolicy {
    pub fn resolve(self, k: usize, tasks: usize) -> usize {
        match self {
            Self::PaperDefault => paper_default_rank(k, tasks),
            Self::Fixed(r) => r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "d")]
    Dim,
    #[serde(rename = "N")]
    Retrain,
    #[serde(rename = "N_prime")]
    Finetune,
    #[serde(rename = "T")]
    Tasks,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [Self::Dim, Self::Retrain, Self::Finetune, Self::Tasks];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dim => "d",
            Self::Retrain => "N",
            Self::Finetune => "N_prime",
            Self::Tasks => "T",
        }
    }

    /// Values used for the default four-panel sweep.
    pub fn default_values(self) -> Vec<usize> {
        match self {
            Self::Dim => vec![5, 10, 15, 20, 30],
            Self::Retrain => vec![500, 1000, 2000, 5000, 10_000, 20_000],
            Self::Finetune => vec![20, 50, 100, 200, 500],
            Self::Tasks => vec![2, 3, 4, 5],
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?} (expected d, N, N_prime or T)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub k: usize,
    #[serde(rename = "T")]
    pub tasks: usize,
    /// Total retraining samples, split evenly over the tasks.
    pub n_retrain: usize,
    pub n_finetune: usize,
    pub sigma_eps: f64,
    pub sigma_x: f64,
    pub finetune_rank_policy: RankPolicy,
    pub trials: usize,
    pub sweep: Option<Sweep>,
    /// Meta-LoRA retraining on the empirical objective.
    pub train: TrainConfig,
    /// LoRA fine-tuning on the held-out samples, shared by both methods.
    pub finetune: TrainConfig,
    /// Ridge added to the pooled normal equations of standard retraining.
    pub ridge: f64,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 10,
            k: 1,
            tasks: 3,
            n_retrain: 5000,
            n_finetune: 100,
            sigma_eps: 0.1,
            sigma_x: 1.0,
            finetune_rank_policy: RankPolicy::PaperDefault,
            trials: 10,
            sweep: None,
            train: TrainConfig::empirical(),
            finetune: TrainConfig::empirical(),
            ridge: 0.0,
            master_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration with one axis set to `value`.
    pub fn at(&self, axis: SweepAxis, value: usize) -> Self {
        let mut c = self.clone();
        match axis {
            SweepAxis::Dim => c.d = value,
            SweepAxis::Retrain => c.n_retrain = value,
            SweepAxis::Finetune => c.n_finetune = value,
            SweepAxis::Tasks => c.tasks = value,
        }
        c.sweep = None;
        c
    }

    /// `(axis name, value, config)` for every sweep point.
    pub fn points(&self) -> Vec<(String, f64, ExperimentConfig)> {
        match &self.sweep {
            Some(s) => s
                .values
                .iter()
                .map(|&v| (s.axis.name().to_string(), v as f64, self.at(s.axis, v)))
                .collect(),
            None => vec![("none".to_string(), 0.0, self.clone())],
        }
    }

    pub fn rank(&self) -> usize {
        self.finetune_rank_policy.resolve(self.k, self.tasks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep has no values".into()));
            }
        }
        if !(self.sigma_x > 0.0) || !(self.sigma_eps >= 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::Config("need sigma_x > 0, sigma_eps >= 0 and ridge >= 0".into()));
        }
        self.train.validate()?;
        self.finetune.validate()?;
        for (axis, value, c) in self.points() {
            let at = if axis == "none" { String::new() } else { format!(" at {axis}={value}") };
            if c.d == 0 || c.k == 0 || c.tasks == 0 {
                return Err(Error::Config(format!("d, k and T must be positive{at}")));
            }
            if c.k * (c.tasks + 1) > c.d {
                return Err(Error::Config(format!(
                    "task diversity needs k(T+1) <= d, got k={} T={} d={}{at}",
                    c.k, c.tasks, c.d
                )));
            }
            if c.n_retrain < c.tasks || c.n_finetune == 0 {
                return Err(Error::Config(format!("need N >= T and N' >= 1{at}")));
            }
            let r = c.rank();
            if r == 0 || r > c.d {
                return Err(Error::Config(format!("fine-tuning rank {r} outside [1, {}]{at}", c.d)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    MetaLoRA,
    #[serde(rename = "SR_LoRA")]
    SrLoRA,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::MetaLoRA => "MetaLoRA",
            Self::SrLoRA => "SR_LoRA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep_axis: String,
    pub sweep_value: f64,
    pub method: Method,
    pub trial: usize,
    pub retrain_loss: f64,
    /// Population loss on the held-out task after fine-tuning; NaN when the
    /// trial failed.
    pub test_loss: f64,
    /// Stream id of the trial; together with the master seed it reproduces
    /// the trial.
    pub seed: u64,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

struct MethodResult {
    retrain_loss: f64,
    test_loss: f64,
    converged: bool,
}

fn trial_spec(master_seed: u64, point: usize, trial: usize) -> RngSpec {
    RngSpec::new(master_seed)
        .derive_indexed(labels::SWEEP, point as u64)
        .derive_indexed(labels::TRIAL, trial as u64)
}

fn finetune_and_score(
    a_hat: &DMatrix<f64>,
    gt: &GroundTruth,
    test: &crate::task_model::TaskDataset,
    cfg: &ExperimentConfig,
    spec: RngSpec,
) -> Result<(f64, bool)> {
    let (adapter, trace) = finetune_empirical(a_hat, test, cfg.rank(), &cfg.finetune, spec.derive(labels::FINETUNE_INIT))?;
    Ok((test_loss_population(&adapter, a_hat, gt)?, trace.converged))
}

fn run_trial(cfg: &ExperimentConfig, spec: RngSpec) -> Result<(Result<MethodResult>, Result<MethodResult>)> {
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
    let meta = (|| {
        let obj = EmpiricalObjective::new(&data, cfg.k)?;
        let init = init_meta_params(cfg.d, cfg.k, cfg.tasks, cfg.train.init_scale, spec);
        let trace = train_meta_gd(&init, &obj, &cfg.train, spec.derive(labels::META_INIT))?;
        let (test_loss, ft_converged) = finetune_and_score(&trace.final_params.a, &gt, &test, cfg, spec)?;
        Ok(MethodResult {
            retrain_loss: trace.final_loss(),
            test_loss,
            converged: trace.converged && ft_converged,
        })
    })();
    let sr = (|| {
        let a = solve_sr_empirical(&data, cfg.ridge)?;
        let retrain_loss = data
            .iter()
            .map(|ds| task_loss_empirical(&a, ds))
            .sum::<Result<f64>>()?;
        let (test_loss, converged) = finetune_and_score(&a, &gt, &test, cfg, spec)?;
        Ok(MethodResult {
            retrain_loss,
            test_loss,
            converged,
        })
    })();
    Ok((meta, sr))
}

/// Runs both methods for every sweep point and trial. Trials run in parallel;
/// rows come back ordered by (sweep point, trial, method). A failing method
/// yields a flagged row instead of aborting the sweep.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let points = cfg.points();
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.trials).map(move |t| (p, t)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(p, trial)| {
            let (axis, value, point_cfg) = &points[p];
            let spec = trial_spec(cfg.master_seed, p, trial);
            let row = |method: Method, res: Result<MethodResult>| match res {
                Ok(r) => AblationRow {
                    sweep_axis: axis.clone(),
                    sweep_value: *value,
                    method,
                    trial,
                    retrain_loss: r.retrain_loss,
                    test_loss: r.test_loss,
                    seed: spec.stream_id,
                    converged: r.converged,
                    error: None,
                },
                Err(e) => AblationRow {
                    sweep_axis: axis.clone(),
                    sweep_value: *value,
                    method,
                    trial,
                    retrain_loss: f64::NAN,
                    test_loss: f64::NAN,
                    seed: spec.stream_id,
                    converged: false,
                    error: Some(e.to_string()),
                },
            };
            match run_trial(point_cfg, spec) {
                Ok((meta, sr)) => [row(Method::MetaLoRA, meta), row(Method::SrLoRA, sr)],
                Err(e) => {
                    let msg = e.to_string();
                    [
                        row(Method::MetaLoRA, Err(Error::Precondition(msg.clone()))),
                        row(Method::SrLoRA, Err(Error::Precondition(msg))),
                    ]
                }
            }
        })
        .collect::<Vec<_>>();
    Ok(rows.into_iter().flatten().collect())
}

/// Runs the default four single-axis sweeps around `base`, one after another.
pub fn run_default_sweeps(base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for axis in SweepAxis::ALL {
        let mut cfg = base.clone();
        cfg.sweep = Some(Sweep {
            axis,
            values: axis.default_values(),
        });
        rows.extend(run_comparison(&cfg)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_axis: String,
    pub sweep_value: f64,
    pub method: Method,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Trials that produced a finite test loss.
    pub trials: usize,
    pub failed: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range of the test loss per (axis, value, method),
/// in order of first appearance.
pub fn summarize(rows: &[AblationRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64, Method)> = Vec::new();
    for r in rows {
        let key = (r.sweep_axis.clone(), r.sweep_value, r.method);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(axis, value, method)| {
            let group: Vec<_> = rows
                .iter()
                .filter(|r| r.sweep_axis == axis && r.sweep_value == value && r.method == method)
                .collect();
            let mut losses: Vec<f64> = group.iter().map(|r| r.test_loss).filter(|v| v.is_finite()).collect();
            losses.sort_by(f64::total_cmp);
            SummaryRow {
                sweep_axis: axis,
                sweep_value: value,
                method,
                median: quantile(&losses, 0.5),
                q1: quantile(&losses, 0.25),
                q3: quantile(&losses, 0.75),
                trials: losses.len(),
                failed: group.len() - losses.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured value over every instance the check covered.
    pub measured: f64,
    pub threshold: f64,
    pub instances: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
    pub all_passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub d_values: Vec<usize>,
    pub k_values: Vec<usize>,
    #[serde(rename = "T_values")]
    pub t_values: Vec<usize>,
    pub seeds: usize,
    /// Manufactured stationary points per two-task combination.
    pub saddle_probes: usize,
    pub train: TrainConfig,
    /// Negative control: replaces A_SR by a rank-deficient perturbation.
    pub corrupt_sr: bool,
    pub master_seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            d_values: vec![6, 10],
            k_values: vec![1, 2],
            t_values: vec![1, 2, 3, 4],
            seeds: 5,
            saddle_probes: 100,
            train: TrainConfig::population(),
            corrupt_sr: false,
            master_seed: 0,
        }
    }
}

impl VerifyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every `(d, k, T)` with `k(T+1) <= d`.
    pub fn combos(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &d in &self.d_values {
            for &k in &self.k_values {
                for &t in &self.t_values {
                    if k * (t + 1) <= d {
                        out.push((d, k, t));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be positive".into()));
        }
        if self.combos().is_empty() {
            return Err(Error::Config("no (d, k, T) combination satisfies k(T+1) <= d".into()));
        }
        self.train.validate()
    }
}

#[derive(Default)]
struct Tally {
    passed: bool,
    measured: f64,
    instances: usize,
    failures: Vec<String>,
}

/// Accumulates per-instance outcomes into one [`CheckResult`] per check name.
struct Checks {
    order: Vec<(String, f64, bool)>,
    tallies: Vec<Tally>,
}

impl Checks {
    fn new() -> Self {
        Self {
            order: Vec::new(),
            tallies: Vec::new(),
        }
    }

    /// Registers a check; `upper` means the measured value must stay below the
    /// threshold (and the worst value is the maximum).
    fn declare(&mut self, name: &str, threshold: f64, upper: bool) {
        self.order.push((name.to_string(), threshold, upper));
        self.tallies.push(Tally {
            passed: true,
            measured: if upper { f64::NEG_INFINITY } else { f64::INFINITY },
            ..Tally::default()
        });
    }

    fn record(&mut self, name: &str, value: f64, ok: bool, instance: &str) {
        let i = self
            .order
            .iter()
            .position(|(n, _, _)| n == name)
            .expect("check declared before use");
        let upper = self.order[i].2;
        let t = &mut self.tallies[i];
        t.instances += 1;
        t.measured = if upper { t.measured.max(value) } else { t.measured.min(value) };
        if value.is_nan() {
            t.measured = f64::NAN;
        }
        if !ok {
            t.passed = false;
            if t.failures.len() < 5 {
                t.failures.push(format!("{instance}: {value:.3e}"));
            }
        }
    }

    fn finish(self) -> VerificationReport {
        let checks: Vec<CheckResult> = self
            .order
            .into_iter()
            .zip(self.tallies)
            .map(|((name, threshold, _), t)| CheckResult {
                name,
                passed: t.passed && t.instances > 0,
                measured: if t.instances == 0 { f64::NAN } else { t.measured },
                threshold,
                instances: t.instances,
                detail: if t.instances == 0 {
                    "no applicable instances".into()
                } else if t.failures.is_empty() {
                    String::new()
                } else {
                    format!("failed at {}", t.failures.join("; "))
                },
            })
            .collect();
        let all_passed = checks.iter().all(|c| c.passed);
        VerificationReport { checks, all_passed }
    }
}

/// `A_SR` minus its smallest nonzero singular component relative to `A*`,
/// which lowers the rank of `A_SR - A*` by one.
fn corrupt(a_sr: &DMatrix<f64>, gt: &GroundTruth) -> DMatrix<f64> {
    let diff = a_sr - &gt.a_star;
    let svd = diff.clone().svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let keep = gt.k * gt.tasks;
    let idx = order[keep - 1];
    let u = svd.u.as_ref().expect("requested").column(idx);
    let v = svd.v_t.as_ref().expect("requested").row(idx);
    a_sr - u * v * svd.singular_values[idx]
}

const ZERO_LOSS: f64 = 1e-10;
const RECOVERY_TOL: f64 = 1e-4;
const EXACT_FIT: f64 = 1e-12;
/// Floor separating a positive fit loss from roundoff; exact fits land near 1e-30.
const POSITIVE_LOSS: f64 = 1e-10;

/// Runs the closed-form, training and landscape invariant suites over every
/// valid `(d, k, T)` combination and seed.
pub fn verify_theorems(cfg: &VerifyConfig) -> Result<VerificationReport> {
    cfg.validate()?;
    let mut checks = Checks::new();
    checks.declare("sr_mean_identity", 1e-10, true);
    checks.declare("sr_rank_equals_kT", 0.0, true);
    checks.declare("sr_rank_kT_adapter_loss_positive", POSITIVE_LOSS, false);
    checks.declare("sr_rank_k(T+1)_adapter_exact", EXACT_FIT, true);
    checks.declare("hessian_symmetric", 1e-12, true);
    checks.declare("hessian_a_block_is_T_identity", 0.0, true);
    checks.declare("ground_truth_hessian_psd", -1e-8, false);
    checks.declare("meta_gd_reaches_zero_loss", ZERO_LOSS, true);
    checks.declare("zero_loss_recovers_ground_truth", RECOVERY_TOL, true);
    checks.declare("rank_k_adapter_exact_after_recovery", EXACT_FIT, true);
    checks.declare("two_task_shift_rank_at_most_2k", 0.0, true);
    checks.declare("two_task_rank_3k_adapter_exact", EXACT_FIT, true);
    checks.declare("two_task_difference_inertia_k_k", 0.0, true);
    checks.declare("two_task_no_candidate_local_min", 0.0, true);
    checks.declare("two_task_curvature_direction_negative", -1e-8, true);
    checks.declare("two_task_eigenbasis_commutator", 1e-6, true);
    checks.declare("two_task_joint_image_deficient", 0.0, true);

    let combos = cfg.combos();
    let jobs: Vec<((usize, usize, usize), usize)> = combos
        .iter()
        .flat_map(|&c| (0..cfg.seeds).map(move |s| (c, s)))
        .collect();
    let base = RngSpec::new(cfg.master_seed);

    type Outcome = Vec<(&'static str, f64, bool, String)>;
    let instance = |(d, k, t): (usize, usize, usize), seed: usize| -> Result<Outcome> {
        let tag = format!("d={d} k={k} T={t} seed={seed}");
        let spec = base
            .derive_indexed(labels::SWEEP, (d * 10_000 + k * 100 + t) as u64)
            .derive_indexed(labels::TRIAL, seed as u64);
        let gt = generate_ground_truth(d, k, t, spec.derive(labels::GROUND_TRUTH))?;
        let mut out: Outcome = Vec::new();
        let mut push = |name: &'static str, v: f64, ok: bool| out.push((name, v, ok, tag.clone()));

        let mut a_sr = solve_sr_population(&gt);
        if cfg.corrupt_sr {
            a_sr = corrupt(&a_sr, &gt);
        }
        let mean = gt
            .retrain_factors()
            .iter()
            .fold(DMatrix::zeros(d, d), |acc, u| acc + outer_self(u))
            / t as f64;
        let identity_err = (&a_sr - &gt.a_star - mean).amax();
        push("sr_mean_identity", identity_err, identity_err < 1e-10);
        let rank = numerical_rank(&(&a_sr - &gt.a_star), 1e-8);
        push("sr_rank_equals_kT", (rank as f64 - (k * t) as f64).abs(), rank == k * t);
        let below = finetune_population(&a_sr, &gt, k * t)?.1;
        push("sr_rank_kT_adapter_loss_positive", below, below > POSITIVE_LOSS);
        let full = finetune_population(&a_sr, &gt, (k * (t + 1)).min(d))?.1;
        push("sr_rank_k(T+1)_adapter_exact", full, full < EXACT_FIT);

        let p_gt = MetaParams::from_ground_truth(&gt);
        if p_gt.flat_len() <= crate::landscape::HESSIAN_ORDER_LIMIT {
            let h = hessian_meta(&p_gt, &gt)?;
            let asym = (&h - h.transpose()).amax();
            push("hessian_symmetric", asym, asym < 1e-12);
            let dd = d * d;
            let a_err = (h.view((0, 0), (dd, dd)) - DMatrix::identity(dd, dd) * t as f64).amax();
            push("hessian_a_block_is_T_identity", a_err, a_err == 0.0);
            let (min_eig, _) = min_eigenpair(&h);
            push("ground_truth_hessian_psd", min_eig, min_eig >= -1e-8);
        }

        let obj = PopulationObjective { gt: &gt };
        let train_cfg = if t == 2 && cfg.train.perturbation_radius == 0.0 {
            cfg.train.with_perturbation(1e-3)
        } else {
            cfg.train
        };
        let init = init_meta_params(d, k, t, train_cfg.init_scale, spec);
        let trace = train_meta_gd(&init, &obj, &train_cfg, spec.derive(labels::META_INIT))?;
        let loss = trace.final_loss();
        push("meta_gd_reaches_zero_loss", loss, loss < ZERO_LOSS);
        let p = &trace.final_params;
        if loss < ZERO_LOSS {
            let shift = &p.a - &gt.a_star;
            if t >= 3 {
                let gram_err = p
                    .u
                    .iter()
                    .zip(gt.retrain_factors())
                    .map(|(u, us)| (outer_self(u) - outer_self(us)).norm())
                    .fold(0.0, f64::max);
                let err = shift.norm().max(gram_err);
                push("zero_loss_recovers_ground_truth", err, err < RECOVERY_TOL);
                let ft = finetune_population(&p.a, &gt, k)?.1;
                push("rank_k_adapter_exact_after_recovery", ft, ft < EXACT_FIT);
            }
            if t == 2 {
                let r = numerical_rank(&shift, 1e-8);
                push("two_task_shift_rank_at_most_2k", r.saturating_sub(2 * k) as f64, r <= 2 * k);
                let ft = finetune_population(&p.a, &gt, (3 * k).min(d))?.1;
                push("two_task_rank_3k_adapter_exact", ft, ft < EXACT_FIT);
            }
        }

        if t == 2 {
            let (pos, neg) = star_difference_inertia(&gt, 1e-10);
            let off = (pos as f64 - k as f64).abs() + (neg as f64 - k as f64).abs();
            push("two_task_difference_inertia_k_k", off, pos == k && neg == k);
        }
        Ok(out)
    };

    let per_instance = jobs
        .par_iter()
        .map(|&(c, s)| instance(c, s))
        .collect::<Result<Vec<_>>>()?;
    for outcome in per_instance {
        for (name, v, ok, tag) in outcome {
            checks.record(name, v, ok, &tag);
        }
    }

    let saddle_jobs: Vec<((usize, usize), usize)> = combos
        .iter()
        .filter(|c| c.2 == 2)
        .map(|c| (c.0, c.1))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .flat_map(|c| (0..cfg.saddle_probes).map(move |i| (c, i)))
        .collect();
    let saddles = saddle_jobs
        .par_iter()
        .map(|&((d, k), i)| stationary_probe(d, k, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    for outcome in saddles {
        for (name, v, ok, tag) in outcome {
            checks.record(name, v, ok, &tag);
        }
    }
    Ok(checks.finish())
}

/// Manufactures one two-task stationary point with nonzero loss and checks
/// the strict-saddle structure there.
fn stationary_probe(d: usize, k: usize, index: usize, cfg: &VerifyConfig) -> Result<Vec<(&'static str, f64, bool, String)>> {
    let tag = format!("d={d} k={k} T=2 probe={index}");
    let spec = RngSpec::new(cfg.master_seed)
        .derive_indexed(labels::PROBE, (d * 100 + k) as u64)
        .derive_indexed(labels::TRIAL, index as u64);
    let gt = generate_ground_truth(d, k, 2, spec.derive(labels::GROUND_TRUTH))?;
    let trace = manufacture_stationary_t2(&gt, &cfg.train, spec)?;
    let p = trace.final_params;
    let mut out = Vec::new();
    let loss = meta_loss_population(&p, &gt)?;
    if !trace.converged || loss <= 1e-6 {
        return Ok(out);
    }
    let grad_tol = (cfg.train.grad_tol * 10.0).max(1e-8);
    let report = classify_stationary_point(&p, &gt, grad_tol, 1e-8)?;
    let is_candidate = report.classification == Classification::CandidateLocalMinimum;
    out.push(("two_task_no_candidate_local_min", is_candidate as u8 as f64, !is_candidate, tag.clone()));
    let rq = find_negative_curvature_t2(&p, &gt, grad_tol)?
        .direction()
        .map_or(f64::NAN, |c| c.rayleigh_quotient);
    out.push(("two_task_curvature_direction_negative", rq, rq < -1e-8, tag.clone()));
    let comm = eigenbasis_commutator(&p.u, &gt)?;
    out.push(("two_task_eigenbasis_commutator", comm, comm < 1e-6, tag.clone()));
    let dim = joint_image_dim(&p.u, 1e-8);
    out.push((
        "two_task_joint_image_deficient",
        (dim + 1).saturating_sub(2 * k) as f64,
        dim < 2 * k,
        tag,
    ));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifySettings {
    pub delta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub max_points: u64,
    pub mode: NetMode,
}

impl Default for CertifySettings {
    fn default() -> Self {
        Self {
            delta: 1e-2,
            epsilon: 1e-3,
            gamma: 1e-8,
            max_points: 200_000_000,
            mode: NetMode::FullNet,
        }
    }
}

/// Spurious-minimum search over random realizable instances (Gaussian `A*`
/// and factors, no diversity requirement).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeExperiment {
    pub d: usize,
    pub k: usize,
    #[serde(rename = "T")]
    pub tasks: usize,
    pub instances: usize,
    pub probe: ProbeConfig,
    /// Descent settings for the descend-then-polish strategy.
    pub search: TrainConfig,
    pub certify: Option<CertifySettings>,
    /// Gradient descent iterations run from a candidate to check that the
    /// loss stays flat.
    pub plateau_iters: usize,
    pub stop_at_first: bool,
    pub master_seed: u64,
}

impl Default for ProbeExperiment {
    fn default() -> Self {
        Self {
            d: 2,
            k: 1,
            tasks: 3,
            instances: 250,
            probe: ProbeConfig {
                starts: 2,
                ..ProbeConfig::default()
            },
            search: ProbeConfig::default_search(),
            certify: Some(CertifySettings::default()),
            plateau_iters: 10_000,
            stop_at_first: true,
            master_seed: 0,
        }
    }
}

impl ProbeExperiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.tasks < 2 || self.instances == 0 || self.probe.starts == 0 {
            return Err(Error::Config("need d, k, instances, starts >= 1 and T >= 2".into()));
        }
        self.search.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeInstance {
    pub instance: usize,
    pub ground_truth: GroundTruth,
    pub outcome: ProbeOutcome,
    /// `|L(start) - L(end)|` of plain GD from the candidate.
    pub plateau_loss_change: Option<f64>,
    pub certificate: Option<NetCertificate>,
    pub certificate_error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub starts: usize,
    pub reached_global: usize,
    pub saddles: usize,
    pub unconverged: usize,
    pub candidates: usize,
    /// Instances that produced a candidate.
    pub hits: Vec<ProbeInstance>,
}

pub fn run_probe(cfg: &ProbeExperiment) -> Result<ProbeReport> {
    cfg.validate()?;
    let base = RngSpec::new(cfg.master_seed);
    let mut report = ProbeReport {
        starts: 0,
        reached_global: 0,
        saddles: 0,
        unconverged: 0,
        candidates: 0,
        hits: Vec::new(),
    };
    for i in 0..cfg.instances {
        let spec = base.derive_indexed(labels::PROBE, i as u64);
        let gt = unconstrained_instance(cfg.d, cfg.k, cfg.tasks, spec)?;
        let outcome = probe_spurious_minimum(&gt, &cfg.search, &cfg.probe, spec.derive(labels::TRIAL))?;
        report.starts += outcome.starts;
        report.reached_global += outcome.reached_global;
        report.saddles += outcome.saddles;
        report.unconverged += outcome.unconverged;
        let Some(cand) = &outcome.candidate else {
            continue;
        };
        report.candidates += 1;
        let p = MetaParams {
            a: DMatrix::zeros(cfg.d, cfg.d),
            u: cand.u_hat.clone(),
        }
        .with_optimal_a(&gt)?;
        let plateau_loss_change = if cfg.plateau_iters > 0 {
            let plain = TrainConfig {
                max_iters: cfg.plateau_iters,
                grad_tol: f64::MIN_POSITIVE,
                ..TrainConfig::population()
            };
            let trace = train_meta_gd(&p, &PopulationObjective { gt: &gt }, &plain, spec.derive(labels::META_INIT))?;
            Some((trace.loss_history[0] - trace.final_loss()).abs())
        } else {
            None
        };
        let (certificate, certificate_error) = match &cfg.certify {
            Some(c) => match certify_local_min(
                &cand.u_hat,
                &gt,
                c.delta,
                c.epsilon,
                c.gamma,
                c.max_points,
                c.mode,
                spec.derive(labels::NET),
            ) {
                Ok(cert) => (Some(cert), None),
                Err(e @ Error::NetInfeasible { .. }) => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            },
            None => (None, None),
        };
        report.hits.push(ProbeInstance {
            instance: i,
            ground_truth: gt,
            outcome,
            plateau_loss_change,
            certificate,
            certificate_error,
        });
        if cfg.stop_at_first {
            break;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Plot,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "plot" => Ok(Self::Plot),
            other => Err(Error::Config(format!("unknown output format {other:?} (expected csv, json or plot)"))),
        }
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "sweep_axis",
    "sweep_value",
    "method",
    "trial",
    "retrain_loss",
    "test_loss",
    "seed",
    "converged",
];

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv(e, path))?;
    w.write_record(CSV_HEADER).map_err(|e| map_csv(e, path))?;
    for r in rows {
        w.write_record([
            r.sweep_axis.clone(),
            r.sweep_value.to_string(),
            r.method.name().to_string(),
            r.trial.to_string(),
            r.retrain_loss.to_string(),
            r.test_loss.to_string(),
            r.seed.to_string(),
            r.converged.to_string(),
        ])
        .map_err(|e| map_csv(e, path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn map_csv(e: csv::Error, path: &Path) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Csv(csv::Error::from(std::io::Error::other(format!("{other:?}")))),
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| map_csv(e, path))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Config(format!("bad number {:?} in {}", field(i), path.display())))
        };
        let int = |i: usize| -> Result<u64> {
            field(i)
                .parse()
                .map_err(|_| Error::Config(format!("bad integer {:?} in {}", field(i), path.display())))
        };
        let method = match field(2) {
            "MetaLoRA" => Method::MetaLoRA,
            "SR_LoRA" => Method::SrLoRA,
            m => return Err(Error::Config(format!("unknown method {m:?} in {}", path.display()))),
        };
        let test_loss = num(5)?;
        rows.push(AblationRow {
            sweep_axis: field(0).to_string(),
            sweep_value: num(1)?,
            method,
            trial: int(3)? as usize,
            retrain_loss: num(4)?,
            test_loss,
            seed: int(6)?,
            converged: field(7) == "true",
            error: test_loss.is_nan().then(|| "failed trial".to_string()),
        });
    }
    Ok(rows)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Test loss versus sweep value for both methods: median line with an
/// interquartile band, log-scale y axis.
pub fn plot_sweep(summary: &[SummaryRow], axis: &str, path: &Path) -> Result<()> {
    use plotters::prelude::*;

    let pts: Vec<&SummaryRow> = summary
        .iter()
        .filter(|s| s.sweep_axis == axis && s.median.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Error::Plot(format!("no finite data for axis {axis}")));
    }
    let xs = pts.iter().map(|s| s.sweep_value);
    let (x_min, x_max) = xs.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let ys = pts.iter().flat_map(|s| [s.q1, s.q3, s.median]).filter(|v| *v > 0.0);
    let (y_min, y_max) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let (y_min, y_max) = if y_min.is_finite() { (y_min / 2.0, y_max * 2.0) } else { (1e-12, 1.0) };
    let pad = ((x_max - x_min) * 0.05).max(0.5);
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(format!("{}: {e}", path.display()));

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Test loss vs {axis} (median, IQR band)"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d((x_min - pad)..(x_max + pad), (y_min..y_max).log_scale())
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc(axis)
        .y_desc("population test loss")
        .y_label_formatter(&|v| format!("{v:.0e}"))
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (method, color) in [(Method::MetaLoRA, BLUE), (Method::SrLoRA, RED)] {
        let series: Vec<&&SummaryRow> = pts.iter().filter(|s| s.method == method).collect();
        if series.is_empty() {
            continue;
        }
        let floor = |v: f64| v.max(y_min);
        let mut band: Vec<(f64, f64)> = series.iter().map(|s| (s.sweep_value, floor(s.q3))).collect();
        band.extend(series.iter().rev().map(|s| (s.sweep_value, floor(s.q1))));
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
            .map_err(|e| plot_err(&e))?;
        chart
            .draw_series(LineSeries::new(
                series.iter().map(|s| (s.sweep_value, floor(s.median))),
                color.stroke_width(2),
            ))
            .map_err(|e| plot_err(&e))?
            .label(method.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResults {
    pub aggregation: String,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<SummaryRow>,
}

/// Writes `ablation.csv`, `ablation.json` (rows plus median/IQR summary),
/// `report.json` when a report is given, and one `sweep_<axis>.svg` per
/// swept axis. Returns the written paths.
pub fn emit_outputs(
    rows: &[AblationRow],
    report: Option<&VerificationReport>,
    out_dir: &Path,
    formats: &[OutputFormat],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let summary = summarize(rows);
    if formats.contains(&OutputFormat::Csv) {
        let path = out_dir.join("ablation.csv");
        write_csv(rows, &path)?;
        written.push(path);
    }
    if formats.contains(&OutputFormat::Json) {
        let path = out_dir.join("ablation.json");
        write_json(
            &AblationResults {
                aggregation: "median and interquartile range of population test loss over trials".into(),
                rows: rows.to_vec(),
                summary: summary.clone(),
            },
            &path,
        )?;
        written.push(path);
        if let Some(report) = report {
            let path = out_dir.join("report.json");
            write_json(report, &path)?;
            written.push(path);
        }
    }
    if formats.contains(&OutputFormat::Plot) {
        let mut axes: Vec<&str> = Vec::new();
        for s in &summary {
            if s.sweep_axis != "none" && !axes.contains(&s.sweep_axis.as_str()) {
                axes.push(&s.sweep_axis);
            }
        }
        for axis in axes {
            let path = out_dir.join(format!("sweep_{axis}.svg"));
            plot_sweep(&summary, axis, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

//! Standard retraining, gradient-descent Meta-LoRA training and LoRA
//! fine-tuning.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::outer_self;
use crate::objectives::{MetaObjective, MetaParams, TaskMoments};
use crate::rng::{gaussian_matrix, labels, uniform_ball, RngSpec};
use crate::schema;
use crate::task_model::{GroundTruth, TaskDataset};

/// Asymmetric rank-`r` fine-tuning adapter; the update is `U V^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    #[serde(with = "schema::matrix")]
    pub u: DMatrix<f64>,
    #[serde(with = "schema::matrix")]
    pub v: DMatrix<f64>,
    pub rank: usize,
}

impl Adapter {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if u.shape() != v.shape() || u.ncols() == 0 {
            return Err(Error::Shape(format!(
                "adapter factors must share a nonzero column count, got {}x{} and {}x{}",
                u.nrows(),
                u.ncols(),
                v.nrows(),
                v.ncols()
            )));
        }
        let rank = u.ncols();
        Ok(Self { u, v, rank })
    }

    pub fn product(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub init_scale: f64,
    pub perturbation_radius: f64,
    pub stall_window: usize,
}

impl TrainConfig {
    /// Defaults for the infinite-sample objective.
    pub fn population() -> Self {
        Self {
            learning_rate: 0.05,
            max_iters: 100_000,
            grad_tol: 1e-9,
            init_scale: 0.01,
            perturbation_radius: 0.0,
            stall_window: 100,
        }
    }

    /// Defaults for finite-sample objectives.
    pub fn empirical() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iters: 50_000,
            ..Self::population()
        }
    }

    pub fn with_perturbation(mut self, radius: f64) -> Self {
        self.perturbation_radius = radius;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.max_iters >= 1
            && self.grad_tol > 0.0
            && self.init_scale >= 0.0
            && self.perturbation_radius >= 0.0
            && self.stall_window >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::population()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace<P> {
    pub config: TrainConfig,
    pub seed: RngSpec,
    /// Loss at the starting point followed by one entry per iteration.
    pub loss_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub final_params: P,
    pub converged: bool,
    pub iterations_used: usize,
    pub perturbations: usize,
}

impl<P> TrainTrace<P> {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history holds the initial loss")
    }

    pub fn final_grad_norm(&self) -> f64 {
        *self
            .grad_norm_history
            .last()
            .expect("history holds the initial gradient")
    }
}

pub(crate) struct FlatRun {
    pub(crate) x: DVector<f64>,
    pub(crate) loss_history: Vec<f64>,
    pub(crate) grad_norm_history: Vec<f64>,
    pub(crate) converged: bool,
    pub(crate) iterations_used: usize,
    pub(crate) perturbations: usize,
}

/// Below this the step-halving loop gives up and the point is treated as
/// stuck.
const MIN_STEP: f64 = 1e-18;
const DIVERGENCE_FACTOR: f64 = 1e6;
/// Loss changes below this multiple of `eps * |loss|` are not resolvable.
const ROUNDOFF_ULPS: f64 = 64.0;

/// Largest loss increase attributable to rounding at loss value `f`.
pub(crate) fn roundoff(f: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * f.abs()
}

/// Full-batch gradient descent with persistent step halving on any loss
/// increase, plus optional random-ball perturbations at near-stationary
/// points whose loss is still high. When the decrease a step should achieve
/// is below the rounding resolution of the loss, a step whose loss moves only
/// by rounding is accepted at the current step size, so the loss history is
/// nonincreasing up to [`roundoff`].
pub(crate) fn descend(
    x0: DVector<f64>,
    loss: impl Fn(&DVector<f64>) -> f64,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    cfg: &TrainConfig,
    rng: RngSpec,
) -> Result<FlatRun> {
    cfg.validate()?;
    let mut perturb_rng = rng.derive(labels::PERTURB).rng();
    let mut x = x0;
    let mut f = loss(&x);
    let initial = f;
    if !f.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            loss: f,
            initial,
        });
    }
    let mut g = grad(&x);
    let mut gn = g.norm();
    let mut run = FlatRun {
        x: DVector::zeros(0),
        loss_history: vec![f],
        grad_norm_history: vec![gn],
        converged: false,
        iterations_used: 0,
        perturbations: 0,
    };
    let perturbing = cfg.perturbation_radius > 0.0;
    let high_loss = 10.0 * cfg.grad_tol;
    let mut lr = cfg.learning_rate;
    let mut stalled = 0usize;

    loop {
        let near_stationary = gn < cfg.grad_tol;
        if near_stationary && !(perturbing && f > high_loss) {
            run.converged = true;
            break;
        }
        if run.iterations_used >= cfg.max_iters {
            break;
        }
        stalled = if near_stationary { stalled + 1 } else { 0 };

        let mut stuck = false;
        if stalled < cfg.stall_window {
            loop {
                let cand = &x - &g * lr;
                let fc = loss(&cand);
                let unresolved = lr * gn * gn <= roundoff(f) && fc <= f + roundoff(f);
                if fc.is_finite() && (fc <= f || unresolved) {
                    x = cand;
                    f = fc;
                    break;
                }
                lr *= 0.5;
                if lr < MIN_STEP {
                    stuck = true;
                    break;
                }
            }
        }
        if stalled >= cfg.stall_window || (stuck && perturbing && f > high_loss) {
            let kick = uniform_ball(&mut perturb_rng, x.len(), cfg.perturbation_radius);
            x += DVector::from_vec(kick);
            f = loss(&x);
            lr = cfg.learning_rate;
            stalled = 0;
            run.perturbations += 1;
        } else if stuck {
            break;
        }

        run.iterations_used += 1;
        if !f.is_finite() || (initial > 0.0 && f > DIVERGENCE_FACTOR * initial) {
            return Err(Error::Divergence {
                iteration: run.iterations_used,
                loss: f,
                initial,
            });
        }
        g = grad(&x);
        gn = g.norm();
        run.loss_history.push(f);
        run.grad_norm_history.push(gn);
    }
    run.x = x;
    Ok(run)
}

/// `A* + (1/T) sum_t U_t* U_t*^T`, the minimizer of the standard-retraining
/// population loss.
pub fn solve_sr_population(gt: &GroundTruth) -> DMatrix<f64> {
    let mut a = gt.a_star.clone();
    let inv_t = 1.0 / gt.tasks as f64;
    for u in gt.retrain_factors() {
        a += outer_self(u) * inv_t;
    }
    a
}

/// Relative pivot below which the pooled covariance counts as singular.
const SINGULAR_PIVOT: f64 = 1e-12;

/// Pooled least squares `(sum Y X^T)(sum X X^T + ridge I)^{-1}`.
pub fn solve_sr_empirical(data: &[TaskDataset], ridge: f64) -> Result<DMatrix<f64>> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    if ridge < 0.0 {
        return Err(Error::Precondition("ridge must be nonnegative".into()));
    }
    let d = first.x.nrows();
    let mut sxx = DMatrix::<f64>::identity(d, d) * ridge;
    let mut syx = DMatrix::<f64>::zeros(first.y.nrows(), d);
    for ds in data {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if ds.x.nrows() != d || ds.y.nrows() != syx.nrows() {
            return Err(Error::Shape("datasets disagree on dimension".into()));
        }
        sxx += &ds.x * ds.x.transpose();
        syx += &ds.y * ds.x.transpose();
    }
    // A sxx = syx  <=>  sxx A^T = syx^T, with sxx symmetric.
    let scale = sxx.diagonal().max();
    let chol = sxx.cholesky().ok_or(Error::Singular)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if !(min_pivot > SINGULAR_PIVOT * scale) {
        return Err(Error::Singular);
    }
    Ok(chol.solve(&syx.transpose()).transpose())
}

/// Random starting point: `A` and every `U_t` with i.i.d. `N(0, init_scale^2)`
/// entries.
pub fn init_meta_params(d: usize, k: usize, tasks: usize, init_scale: f64, rng: RngSpec) -> MetaParams {
    let mut r = rng.derive(labels::META_INIT).rng();
    let a = gaussian_matrix(&mut r, d, d, init_scale);
    let u = (0..tasks)
        .map(|_| gaussian_matrix(&mut r, d, k, init_scale))
        .collect();
    MetaParams { a, u }
}

/// Joint gradient descent on `(A, U_1, ..., U_T)`.
pub fn train_meta_gd<O: MetaObjective + ?Sized>(
    init: &MetaParams,
    objective: &O,
    cfg: &TrainConfig,
    rng: RngSpec,
) -> Result<TrainTrace<MetaParams>> {
    let (d, k, tasks) = objective.dims();
    if init.d() != d || init.k() != k || init.tasks() != tasks || init.a.ncols() != d {
        return Err(Error::Shape(format!(
            "init is (d={}, k={}, T={}) but objective expects (d={d}, k={k}, T={tasks})",
            init.d(),
            init.k(),
            init.tasks()
        )));
    }
    let unflat = |x: &DVector<f64>| {
        MetaParams::from_flat(x.as_slice(), d, k, tasks).expect("length preserved by descent")
    };
    let run = descend(
        init.to_flat(),
        |x| objective.loss(&unflat(x)),
        |x| objective.grad(&unflat(x)).to_flat(),
        cfg,
        rng,
    )?;
    Ok(TrainTrace {
        config: *cfg,
        seed: rng,
        final_params: unflat(&run.x),
        loss_history: run.loss_history,
        grad_norm_history: run.grad_norm_history,
        converged: run.converged,
        iterations_used: run.iterations_used,
        perturbations: run.perturbations,
    })
}

/// Truncated SVD of `m`; the singular values are split evenly between the
/// factors as `sigma^{1/2}`. Returns the adapter and `1/2 sum_{i>r} sigma_i^2`.
pub fn best_rank_approx(m: &DMatrix<f64>, rank: usize) -> Result<(Adapter, f64)> {
    let n = m.nrows().min(m.ncols());
    if rank == 0 || rank > n {
        return Err(Error::Precondition(format!(
            "rank must lie in [1, {n}], got {rank}"
        )));
    }
    let svd = m.clone().svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let root: Vec<f64> = order[..rank]
        .iter()
        .map(|&i| svd.singular_values[i].sqrt())
        .collect();
    let uf = DMatrix::from_fn(m.nrows(), rank, |r, c| u[(r, order[c])] * root[c]);
    let vf = DMatrix::from_fn(m.ncols(), rank, |r, c| v_t[(order[c], r)] * root[c]);
    let tail = 0.5
        * order[rank..]
            .iter()
            .map(|&i| svd.singular_values[i].powi(2))
            .sum::<f64>();
    Ok((Adapter::new(uf, vf)?, tail))
}

/// Optimal rank-`r` adapter for the held-out task in the infinite-sample
/// limit, and its test loss.
pub fn finetune_population(a_hat: &DMatrix<f64>, gt: &GroundTruth, rank: usize) -> Result<(Adapter, f64)> {
    if a_hat.shape() != (gt.d, gt.d) {
        return Err(Error::Shape("A_hat must be d x d".into()));
    }
    let residual = gt.task_matrix(gt.test_task())? - a_hat;
    best_rank_approx(&residual, rank)
}

/// Gradient descent on `(U, V)` for the held-out task's samples with `A_hat`
/// frozen.
pub fn finetune_empirical(
    a_hat: &DMatrix<f64>,
    data: &TaskDataset,
    rank: usize,
    cfg: &TrainConfig,
    rng: RngSpec,
) -> Result<(Adapter, TrainTrace<Adapter>)> {
    let d = a_hat.nrows();
    if rank == 0 || rank > d {
        return Err(Error::Precondition(format!("rank must lie in [1, {d}], got {rank}")));
    }
    if a_hat.ncols() != d || data.x.nrows() != d || data.y.nrows() != d {
        return Err(Error::Shape("A_hat and data dimensions disagree".into()));
    }
    let moments = TaskMoments::from_dataset(data)?;
    let mut r = rng.derive(labels::FINETUNE_INIT).rng();
    let u0 = gaussian_matrix(&mut r, d, rank, cfg.init_scale);
    let v0 = gaussian_matrix(&mut r, d, rank, cfg.init_scale);
    let split = d * rank;
    let unflat = |x: &DVector<f64>| {
        (
            DMatrix::from_column_slice(d, rank, &x.as_slice()[..split]),
            DMatrix::from_column_slice(d, rank, &x.as_slice()[split..]),
        )
    };
    let mut x0 = Vec::with_capacity(2 * split);
    x0.extend_from_slice(u0.as_slice());
    x0.extend_from_slice(v0.as_slice());
    let run = descend(
        DVector::from_vec(x0),
        |x| {
            let (u, v) = unflat(x);
            moments.loss(&(a_hat + &u * v.transpose()))
        },
        |x| {
            let (u, v) = unflat(x);
            let g = moments.grad(&(a_hat + &u * v.transpose()));
            let gu = &g * &v;
            let gv = g.transpose() * &u;
            let mut out = Vec::with_capacity(2 * split);
            out.extend_from_slice(gu.as_slice());
            out.extend_from_slice(gv.as_slice());
            DVector::from_vec(out)
        },
        cfg,
        rng,
    )?;
    let (u, v) = unflat(&run.x);
    let adapter = Adapter::new(u, v)?;
    let trace = TrainTrace {
        config: *cfg,
        seed: rng,
        final_params: adapter.clone(),
        loss_history: run.loss_history,
        grad_norm_history: run.grad_norm_history,
        converged: run.converged,
        iterations_used: run.iterations_used,
        perturbations: run.perturbations,
    };
    Ok((adapter, trace))
}

/// Fine-tuning rank used by the synthetic experiments: `3k` when `T = 2`,
/// `k` otherwise.
pub fn paper_default_rank(k: usize, tasks: usize) -> usize {
    if tasks == 2 {
        3 * k
    } else {
        k
    }
}
